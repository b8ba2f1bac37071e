"""Compression/speed-up accounting and Top-1 accuracy.

Parameter and multiply counts are exact enumerations of the constructed
sublayers.  Note the widely printed closed-form ratios use a single shared
rank R and count the core as R * D^2; that middle term is dimensionally
inconsistent with a D x D x R3 x R4 core (which costs D^2 * R3 * R4), so
the shared-rank forms are kept separate (``*_shared_rank``) and surfaced
only behind the report's comparison flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .rank_select import RankReport

__all__ = [
    "conv_param_counts",
    "conv_cr",
    "conv_speedup",
    "conv_cr_shared_rank",
    "conv_sr_shared_rank",
    "fc_param_counts",
    "fc_cr",
    "top1",
    "LayerCompression",
    "CompressionReport",
    "model_cr",
    "render_report",
    "report_to_dict",
    "report_from_dict",
]


def conv_param_counts(d: int, s: int, t: int, r3: int, r4: int) -> tuple[int, int]:
    """(dense params, factorized params) for a D x D conv at ranks (R3, R4)."""
    original = d * d * s * t
    compressed = s * r3 + d * d * r3 * r4 + t * r4
    return original, compressed


def conv_cr(d: int, s: int, t: int, r3: int, r4: int) -> float:
    original, compressed = conv_param_counts(d, s, t, r3, r4)
    return original / compressed


def conv_speedup(
    d: int, s: int, t: int, r3: int, r4: int, h: int, w: int, h_out: int, w_out: int
) -> float:
    """Multiply-count ratio of the dense conv over its three sublayers.

    The 1x1 input sublayer runs at the input resolution (H x W); the core
    and the 1x1 output sublayer run at the output resolution.
    """
    dense = t * s * d * d * h_out * w_out
    factorized = r3 * s * h * w + r3 * r4 * d * d * h_out * w_out + t * r4 * h_out * w_out
    return dense / factorized


def conv_cr_shared_rank(d: int, s: int, t: int, r: int) -> float:
    """Conventional printed CR with one shared rank (core counted as R * D^2)."""
    return (t * s * d * d) / (r * s + r * d * d + t * r)


def conv_sr_shared_rank(
    d: int, s: int, t: int, r: int, h: int, w: int, h_out: int, w_out: int
) -> float:
    """Conventional printed SR with one shared rank."""
    dense = t * s * d * d * h_out * w_out
    factorized = r * s * h * w + r * d * d * h_out * w_out + t * r * h_out * w_out
    return dense / factorized


def fc_param_counts(m: int, n: int, r: int) -> tuple[int, int]:
    return m * n, m * r + r * n


def fc_cr(m: int, n: int, r: int) -> float:
    """CR of a truncated fc layer; equals its SR (1x1 conv view, two sublayers)."""
    original, compressed = fc_param_counts(m, n, r)
    return original / compressed


def top1(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of samples whose predicted class matches the label.

    ``predictions`` may be class indices or a score matrix (argmax per row).
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim == 2:
        predictions = np.argmax(predictions, axis=1)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must align")
    if labels.size == 0:
        raise ValueError("empty label set")
    return 100.0 * float(np.sum(predictions == labels)) / labels.size


@dataclass
class LayerCompression:
    """Per-layer accounting entry."""

    name: str
    kind: str  # "conv" or "fc"
    p_original: int
    p_compressed: int
    cr: float
    sr: float
    ranks: tuple[int, ...]
    dims: tuple[int, ...] = ()
    spatial: tuple[int, ...] = ()  # (H, W, H_out, W_out) for conv layers


@dataclass
class CompressionReport:
    """Whole-model compression summary."""

    layers: list[LayerCompression]
    top1_before: float | None = None
    top1_after: float | None = None
    rank_reports: list[RankReport] = field(default_factory=list)

    @property
    def p_original(self) -> int:
        return sum(e.p_original for e in self.layers)

    @property
    def p_compressed(self) -> int:
        return sum(e.p_compressed for e in self.layers)


def model_cr(report: CompressionReport) -> float:
    """Whole-model compression ratio: total dense params over total kept params."""
    compressed = report.p_compressed
    if compressed <= 0:
        raise ValueError("compressed parameter count must be positive")
    return report.p_original / compressed


def render_report(report: CompressionReport, shared_rank_formulas: bool = False) -> str:
    """Human-readable table; optionally append the shared-rank comparison columns."""
    header = f"{'layer':<12}{'kind':<6}{'ranks':<12}{'P_orig':>10}{'P_comp':>10}{'CR':>8}{'SR':>8}"
    if shared_rank_formulas:
        header += f"{'CR(R)':>9}{'SR(R)':>9}"
    lines = [header, "-" * len(header)]
    for e in report.layers:
        row = (
            f"{e.name:<12}{e.kind:<6}{str(e.ranks):<12}"
            f"{e.p_original:>10}{e.p_compressed:>10}{e.cr:>8.2f}{e.sr:>8.2f}"
        )
        if shared_rank_formulas:
            if e.kind == "conv" and len(e.dims) == 3 and len(e.spatial) == 4:
                d, s, t = e.dims
                r = max(e.ranks)
                row += f"{conv_cr_shared_rank(d, s, t, r):>9.2f}"
                row += f"{conv_sr_shared_rank(d, s, t, r, *e.spatial):>9.2f}"
            else:
                row += f"{e.cr:>9.2f}{e.sr:>9.2f}"
        lines.append(row)
    lines.append("-" * len(header))
    lines.append(
        f"model: P_original={report.p_original} P_compressed={report.p_compressed} "
        f"CR={model_cr(report):.2f}x"
    )
    if report.top1_before is not None:
        lines.append(f"top1 before: {report.top1_before:.2f}%")
    if report.top1_after is not None:
        lines.append(f"top1 after:  {report.top1_after:.2f}%")
    return "\n".join(lines)


def report_to_dict(report: CompressionReport) -> dict:
    """JSON-ready representation (numpy arrays become lists)."""
    return {
        "layers": [
            {**asdict(e), "ranks": list(e.ranks), "dims": list(e.dims), "spatial": list(e.spatial)}
            for e in report.layers
        ],
        "totals": {
            "p_original": report.p_original,
            "p_compressed": report.p_compressed,
            "model_cr": model_cr(report),
        },
        "top1_before": report.top1_before,
        "top1_after": report.top1_after,
        "rank_reports": [
            {
                "layer_id": r.layer_id,
                "estimated_rank": r.estimated_rank,
                "singular_values": [float(v) for v in r.singular_values],
                "retained_mask": [bool(v) for v in r.retained_mask],
                "noise_sigma2": r.noise_sigma2,
            }
            for r in report.rank_reports
        ],
    }


def report_from_dict(d: dict) -> CompressionReport:
    layers = [
        LayerCompression(
            name=e["name"],
            kind=e["kind"],
            p_original=int(e["p_original"]),
            p_compressed=int(e["p_compressed"]),
            cr=float(e["cr"]),
            sr=float(e["sr"]),
            ranks=tuple(e["ranks"]),
            dims=tuple(e.get("dims", ())),
            spatial=tuple(e.get("spatial", ())),
        )
        for e in d["layers"]
    ]
    reports = [
        RankReport(
            layer_id=r["layer_id"],
            estimated_rank=int(r["estimated_rank"]),
            singular_values=np.asarray(r["singular_values"], dtype=np.float64),
            retained_mask=np.asarray(r["retained_mask"], dtype=bool),
            noise_sigma2=float(r["noise_sigma2"]),
        )
        for r in d.get("rank_reports", [])
    ]
    return CompressionReport(
        layers=layers,
        top1_before=d.get("top1_before"),
        top1_after=d.get("top1_after"),
        rank_reports=reports,
    )
