"""Two-phase compression training at desk scale.

Phase 1 trains an over-parameterized factorized model (full channel ranks)
with plain mini-batch SGD on cross-entropy plus the orthogonality penalty
on every conv factor matrix.  Ranks are then estimated per layer, the
model is truncated by refitting each layer at the selected ranks, and
phase 2 retrains the small model on cross-entropy alone (the penalty can
be kept with ``keep_ortho_phase2``).

Models are stacks of conv blocks (each followed by a rectifier), a global
average pool, and fc blocks ending in a softmax cross-entropy head.  All
weights are float32; gradient math runs in float64, and every run is
reproducible bit-for-bit for a fixed seed.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .data import Dataset
from .decomp import (
    ConvLayerSpec,
    FactorizedConv,
    FactorizedFc,
    FcLayerSpec,
    factorize_conv_layer,
    factorize_fc_layer,
    tsvd_truncate,
    tucker2_decompose,
    tucker2_reconstruct,
)
from .layers import (
    conv2d_factorized,
    conv2d_factorized_grad,
    conv2d_reference,
    conv2d_reference_grad,
    conv_output_size,
    fc_factorized_forward,
    fc_factorized_grad,
    fc_forward,
)
from .regularizer import OrthoConfig, ortho_penalty, ortho_penalty_grad, total_loss
from .rank_select import RankPolicy, select_conv_ranks, select_fc_rank

__all__ = [
    "NumericError",
    "TrainConfig",
    "ConvBlockArch",
    "Architecture",
    "tinynet",
    "Model",
    "init_model",
    "model_forward",
    "model_loss",
    "predict",
    "evaluate",
    "train_overparam",
    "retrain_lowrank",
    "truncate_model",
    "compress_pipeline",
    "build_compression_report",
    "lr_at_epoch",
]

_CONV_KINDS = (FactorizedConv, ConvLayerSpec)
_FC_KINDS = (FactorizedFc, FcLayerSpec)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for both phases.

    The learning-rate schedule is a list of (epoch threshold, rate) pairs;
    the active rate is the last one whose threshold has been reached.
    """

    epochs_overparam: int = 30
    epochs_lowrank: int = 30
    batch_size: int = 128
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.1), (100, 0.01), (150, 0.001))
    rho: float = 0.01
    lam: float = 1.0
    seed: int = 0
    keep_ortho_phase2: bool = False

    def __post_init__(self):
        thresholds = [t for t, _ in self.lr_schedule]
        rates = [r for _, r in self.lr_schedule]
        if not rates or any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if thresholds != sorted(set(thresholds)) or thresholds[0] != 0:
            raise ValueError("schedule thresholds must start at 0 and strictly increase")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def ortho(self) -> OrthoConfig:
        return OrthoConfig(rho=self.rho, lam=self.lam)


def lr_at_epoch(schedule, epoch: int) -> float:
    rate = schedule[0][1]
    for threshold, r in schedule:
        if epoch >= threshold:
            rate = r
    return rate


@dataclass(frozen=True)
class ConvBlockArch:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class Architecture:
    """Static description of a conv stack + GAP + fc head."""

    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    conv_blocks: tuple[ConvBlockArch, ...]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "conv_blocks": [
                {
                    "out_channels": b.out_channels,
                    "kernel_size": b.kernel_size,
                    "stride": b.stride,
                    "padding": b.padding,
                }
                for b in self.conv_blocks
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "Architecture":
        return Architecture(
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            conv_blocks=tuple(
                ConvBlockArch(
                    out_channels=int(b["out_channels"]),
                    kernel_size=int(b.get("kernel_size", 3)),
                    stride=int(b.get("stride", 1)),
                    padding=int(b.get("padding", 1)),
                )
                for b in d["conv_blocks"]
            ),
        )


def tinynet(input_shape=(3, 8, 8), num_classes: int = 4) -> Architecture:
    """Small two-conv-block reference architecture (C -> 16 -> 32, 3x3)."""
    return Architecture(
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        conv_blocks=(ConvBlockArch(16), ConvBlockArch(32)),
    )


@dataclass
class Model:
    """Ordered blocks: conv kinds first, then fc kinds; the last block is the head."""

    blocks: list
    names: list[str]
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        if len(self.blocks) != len(self.names):
            raise ValueError("blocks and names must align")
        if not self.blocks or not isinstance(self.blocks[-1], _FC_KINDS):
            raise ValueError("model must end in a fully connected head")
        seen_fc = False
        for b in self.blocks:
            if isinstance(b, _FC_KINDS):
                seen_fc = True
            elif isinstance(b, _CONV_KINDS):
                if seen_fc:
                    raise ValueError("conv blocks cannot follow fc blocks")
            else:
                raise TypeError(f"unsupported block type {type(b).__name__}")

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Copy with every weight array cast to ``dtype`` (used by 64-bit checks)."""
        m = self.copy()
        for b in m.blocks:
            for attr in _param_attrs(b):
                setattr(b, attr, getattr(b, attr).astype(dtype))
        return m

    @property
    def param_count(self) -> int:
        return sum(b.param_count for b in self.blocks)


def _param_attrs(block) -> tuple[str, ...]:
    if isinstance(block, FactorizedConv):
        return ("u3", "core", "u4")
    if isinstance(block, ConvLayerSpec):
        return ("kernel",)
    if isinstance(block, FactorizedFc):
        return ("a", "b")
    return ("weight",)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(arch: Architecture, seed) -> Model:
    """Build the over-parameterized model (full ranks), Xavier-uniform init.

    ``seed`` is anything ``numpy.random.default_rng`` accepts; the same
    seed always yields bit-identical weights.
    """
    rng = np.random.default_rng(seed)
    blocks: list = []
    names: list[str] = []
    channels = arch.input_shape[0]
    for i, spec in enumerate(arch.conv_blocks):
        s, t, d = channels, spec.out_channels, spec.kernel_size
        u3 = _xavier(rng, (s, s), s, s)
        core = _xavier(rng, (d, d, s, t), s * d * d, t * d * d)
        u4 = _xavier(rng, (t, t), t, t)
        blocks.append(FactorizedConv(u3, core, u4, stride=spec.stride, padding=spec.padding))
        names.append(f"conv{i + 1}")
        channels = t
    m, n = channels, arch.num_classes
    r = min(m, n)
    a = _xavier(rng, (m, r), m, r)
    b = _xavier(rng, (r, n), r, n)
    blocks.append(FactorizedFc(a, b))
    names.append("head")
    return Model(blocks, names, tuple(arch.input_shape), arch.num_classes)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def model_forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a batch ``(B, C, H, W)`` (or a single image)."""
    logits, _ = _forward_cached(model, np.asarray(x))
    return logits


def _forward_cached(model: Model, x: np.ndarray):
    single = x.ndim == 3
    a = x[None] if single else x
    caches = []
    i = 0
    while i < len(model.blocks) and isinstance(model.blocks[i], _CONV_KINDS):
        blk = model.blocks[i]
        if isinstance(blk, FactorizedConv):
            pre = conv2d_factorized(a, blk)
        else:
            pre = conv2d_reference(a, blk)
        post = _relu(pre)
        caches.append(("conv", a, pre))
        a = post
        i += 1
    spatial = a.shape[2:]
    feats = a.mean(axis=(2, 3))
    caches.append(("gap", a.shape, spatial))
    a = feats
    n_fc = len(model.blocks) - i
    for j in range(i, len(model.blocks)):
        blk = model.blocks[j]
        last = j == len(model.blocks) - 1
        pre = fc_factorized_forward(a, blk) if isinstance(blk, FactorizedFc) else fc_forward(a, blk)
        caches.append(("fc", a, pre, last))
        a = pre if last else _relu(pre)
    logits = a[0] if single else a
    return logits, caches


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = labels.shape[0]
    ce = -float(np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return ce, dlogits


def model_loss(model: Model, x: np.ndarray, labels: np.ndarray, ortho: OrthoConfig | None = None) -> float:
    """Mean cross-entropy plus (optionally) the weighted orthogonality penalties."""
    logits, _ = _forward_cached(model, np.asarray(x))
    ce, _ = _softmax_ce(logits, np.asarray(labels))
    if ortho is None or ortho.rho == 0.0 or ortho.lam == 0.0:
        return ce
    return total_loss(ce, _penalties(model, ortho.rho), ortho.lam)


def _penalties(model: Model, rho: float) -> list[float]:
    pens = []
    for b in model.blocks:
        if isinstance(b, FactorizedConv):
            pens.append(ortho_penalty(b.u3, rho))
            pens.append(ortho_penalty(b.u4, rho))
    return pens


def _loss_and_grads(model: Model, x: np.ndarray, labels: np.ndarray, ortho: OrthoConfig | None):
    logits, caches = _forward_cached(model, x)
    ce, dlogits = _softmax_ce(logits, labels)
    grads: list = [None] * len(model.blocks)

    da = dlogits
    fc_caches = [c for c in caches if c[0] == "fc"]
    fc_start = len(model.blocks) - len(fc_caches)
    for j in range(len(model.blocks) - 1, fc_start - 1, -1):
        blk = model.blocks[j]
        _, a_in, pre, last = fc_caches[j - fc_start]
        if not last:
            da = da * (pre > 0)
        if isinstance(blk, FactorizedFc):
            dA, dB, da = fc_factorized_grad(blk, a_in, da)
            grads[j] = (dA, dB)
        else:
            dW = a_in.astype(np.float64).T @ da.astype(np.float64)
            da = da.astype(np.float64) @ blk.weight.astype(np.float64).T
            grads[j] = (dW.astype(np.float32),)

    gap_shape, spatial = next(c[1:] for c in caches if c[0] == "gap")
    hw = spatial[0] * spatial[1]
    da = np.broadcast_to((da / hw)[:, :, None, None], gap_shape).astype(da.dtype)

    conv_caches = [c for c in caches if c[0] == "conv"]
    for j in range(len(conv_caches) - 1, -1, -1):
        blk = model.blocks[j]
        _, a_in, pre = conv_caches[j]
        da = da * (pre > 0)
        if isinstance(blk, FactorizedConv):
            du3, dcore, du4, da = conv2d_factorized_grad(blk, a_in, da)
            if ortho is not None and ortho.rho > 0 and ortho.lam > 0:
                du3 = du3 + ortho.lam * ortho_penalty_grad(blk.u3, ortho.rho)
                du4 = du4 + ortho.lam * ortho_penalty_grad(blk.u4, ortho.rho)
            grads[j] = (du3, dcore, du4)
        else:
            dk, da = conv2d_reference_grad(blk, a_in, da)
            grads[j] = (dk,)

    loss = ce
    if ortho is not None and ortho.rho > 0 and ortho.lam > 0:
        loss = total_loss(ce, _penalties(model, ortho.rho), ortho.lam)
    return loss, ce, grads


def _sgd_step(model: Model, grads: list, lr: float) -> None:
    for blk, g in zip(model.blocks, grads):
        for attr, dg in zip(_param_attrs(blk), g):
            w = getattr(blk, attr)
            updated = w.astype(np.float64) - lr * dg.astype(np.float64)
            setattr(blk, attr, updated.astype(w.dtype))


def _run_epochs(model: Model, data: Dataset, cfg: TrainConfig, epochs: int,
                ortho: OrthoConfig | None, rng: np.random.Generator) -> list[float]:
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    history: list[float] = []
    for epoch in range(epochs):
        lr = lr_at_epoch(cfg.lr_schedule, epoch)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, _, grads = _loss_and_grads(model, data.images[idx], data.labels[idx], ortho)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            _sgd_step(model, grads, lr)
            total += loss * len(idx)
            seen += len(idx)
        history.append(total / seen)
    return history


def train_overparam(model: Model, data: Dataset, cfg: TrainConfig,
                    rng: np.random.Generator | None = None):
    """Phase 1: SGD on cross-entropy + orthogonality penalty.  Returns a new model."""
    model = model.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    history = _run_epochs(model, data, cfg, cfg.epochs_overparam, cfg.ortho, rng)
    return model, history


def retrain_lowrank(model: Model, data: Dataset, cfg: TrainConfig,
                    rng: np.random.Generator | None = None):
    """Phase 2: SGD on cross-entropy alone (penalty kept only on request)."""
    model = model.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    ortho = cfg.ortho if cfg.keep_ortho_phase2 else None
    history = _run_epochs(model, data, cfg, cfg.epochs_lowrank, ortho, rng)
    return model, history


def truncate_model(model: Model, ranks) -> Model:
    """Refit each listed block at lower ranks.

    ``ranks`` maps block name -> (r3, r4) for conv blocks or r for fc
    blocks; unlisted blocks are kept as they are.  Conv blocks are rebuilt
    from the full kernel they currently represent, fc blocks from their
    current product.
    """
    out = model.copy()
    for i, (name, blk) in enumerate(zip(out.names, out.blocks)):
        if name not in ranks:
            continue
        r = ranks[name]
        if isinstance(blk, FactorizedConv):
            kernel = tucker2_reconstruct(blk).astype(np.float32)
            out.blocks[i] = tucker2_decompose(
                kernel, r[0], r[1], stride=blk.stride, padding=blk.padding
            )
        elif isinstance(blk, ConvLayerSpec):
            out.blocks[i] = factorize_conv_layer(blk, r[0], r[1])
        elif isinstance(blk, FactorizedFc):
            w = (blk.a.astype(np.float64) @ blk.b.astype(np.float64)).astype(np.float32)
            out.blocks[i] = tsvd_truncate(w, int(r))
        else:
            out.blocks[i] = factorize_fc_layer(blk, int(r))
    return out


def predict(model: Model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Logits for a stack of images, evaluated in batches."""
    images = np.asarray(images)
    outs = [model_forward(model, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs)


def evaluate(model: Model, data: Dataset) -> float:
    """Top-1 accuracy (percent) of the model on a dataset."""
    return metrics.top1(predict(model, data.images), data.labels)


def _dense_kernel(blk) -> np.ndarray:
    return tucker2_reconstruct(blk) if isinstance(blk, FactorizedConv) else blk.kernel


def _dense_weight(blk) -> np.ndarray:
    if isinstance(blk, FactorizedFc):
        return blk.a.astype(np.float64) @ blk.b.astype(np.float64)
    return blk.weight


def select_model_ranks(model: Model, policy: RankPolicy):
    """Estimate per-block ranks for every block; returns (ranks dict, reports)."""
    ranks: dict = {}
    reports = []
    for name, blk in zip(model.names, model.blocks):
        if isinstance(blk, _CONV_KINDS):
            (r3, r4), reps = select_conv_ranks(
                _dense_kernel(blk), policy, layer_id=name, return_reports=True
            )
            ranks[name] = (r3, r4)
            reports.extend(reps)
        else:
            r, rep = select_fc_rank(_dense_weight(blk), policy, layer_id=name, return_report=True)
            ranks[name] = r
            reports.append(rep)
    return ranks, reports


def build_compression_report(
    model: Model,
    top1_before: float | None = None,
    top1_after: float | None = None,
    rank_reports=(),
) -> metrics.CompressionReport:
    """Exact per-layer parameter/multiply accounting against the dense baseline."""
    entries = []
    _, h, w = model.input_shape
    for name, blk in zip(model.names, model.blocks):
        if isinstance(blk, _CONV_KINDS):
            d, s, t = blk.dims
            h_out = conv_output_size(h, d, blk.stride, blk.padding)
            w_out = conv_output_size(w, d, blk.stride, blk.padding)
            if isinstance(blk, FactorizedConv):
                r3, r4 = blk.ranks
                p_orig, p_comp = metrics.conv_param_counts(d, s, t, r3, r4)
                sr = metrics.conv_speedup(d, s, t, r3, r4, h, w, h_out, w_out)
                ranks = (r3, r4)
            else:
                p_orig = p_comp = blk.param_count
                sr = 1.0
                ranks = ()
            entries.append(
                metrics.LayerCompression(
                    name=name,
                    kind="conv",
                    p_original=p_orig,
                    p_compressed=p_comp,
                    cr=p_orig / p_comp,
                    sr=sr,
                    ranks=ranks,
                    dims=(d, s, t),
                    spatial=(h, w, h_out, w_out),
                )
            )
            h, w = h_out, w_out
        else:
            m, n = blk.dims
            if isinstance(blk, FactorizedFc):
                p_orig, p_comp = metrics.fc_param_counts(m, n, blk.rank)
                ranks = (blk.rank,)
            else:
                p_orig = p_comp = blk.param_count
                ranks = ()
            cr = p_orig / p_comp
            entries.append(
                metrics.LayerCompression(
                    name=name, kind="fc", p_original=p_orig, p_compressed=p_comp,
                    cr=cr, sr=cr, ranks=ranks, dims=(m, n),
                )
            )
    return metrics.CompressionReport(
        layers=entries,
        top1_before=top1_before,
        top1_after=top1_after,
        rank_reports=list(rank_reports),
    )


def compress_pipeline(
    arch: Architecture,
    data: Dataset,
    cfg: TrainConfig,
    policy: RankPolicy = RankPolicy(),
    eval_data: Dataset | None = None,
):
    """Full run: init, phase-1 training, rank selection, truncation, phase-2 retraining.

    Returns the final model and a report holding per-layer counts, ratios,
    rank evidence, and Top-1 before (phase-1 model) and after retraining.
    """
    if eval_data is None:
        eval_data = data
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = init_model(arch, seeds[0])
    model, _ = train_overparam(model, data, cfg, rng=np.random.default_rng(seeds[1]))
    top1_before = evaluate(model, eval_data)
    ranks, reports = select_model_ranks(model, policy)
    truncated = truncate_model(model, ranks)
    final, _ = retrain_lowrank(truncated, data, cfg, rng=np.random.default_rng(seeds[2]))
    top1_after = evaluate(final, eval_data)
    report = build_compression_report(final, top1_before, top1_after, reports)
    return final, report
