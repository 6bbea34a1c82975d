"""Pairwise cosine similarity between expert update matrices.

For experts ``B_i A_i`` the Frobenius inner product factorises as
``sum((B_i^T B_j) * (A_i A_j^T))``, which for rank-1 experts is
``(b_i . b_j)(a_i . a_j)``. Cosines are computed from these Gram matrices,
so the d_in x d_out products are never materialised. Coefficients are not
part of the comparison.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ShapeError
from .experts import ExpertBank
from .numerics import Matrix


def _arr(m) -> np.ndarray:
    return m.data if isinstance(m, Matrix) else np.asarray(m, dtype=np.float64)


def _cosine_matrix(bs: Sequence[np.ndarray], as_: Sequence[np.ndarray]) -> np.ndarray:
    r = len(bs)
    if all(b.shape[1] == 1 for b in bs):
        Bm = np.concatenate(bs, axis=1)
        Am = np.concatenate(as_, axis=0)
        inner = (Bm.T @ Bm) * (Am @ Am.T)
    else:
        inner = np.empty((r, r))
        for i in range(r):
            for j in range(i, r):
                inner[i, j] = inner[j, i] = np.sum((bs[i].T @ bs[j]) * (as_[i] @ as_[j].T))
    norms = np.sqrt(np.clip(np.diag(inner), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = inner / np.outer(norms, norms)
    cos = np.clip(cos, -1.0, 1.0)
    zero = norms == 0.0
    cos[zero, :] = np.nan
    cos[:, zero] = np.nan
    idx = np.flatnonzero(~zero)
    cos[idx, idx] = 1.0
    return cos


def expert_similarity(bank: ExpertBank) -> np.ndarray:
    """r x r cosine matrix between the coefficient-free expert products.

    Rows/columns of all-zero experts (e.g. untrained, b = 0) are NaN.
    """
    return _cosine_matrix([e.b.data for e in bank.experts], [e.a.data for e in bank.experts])


def lora_similarity(B, A) -> np.ndarray:
    """Cosine matrix of the r rank-1 pieces (column i of B) x (row i of A)."""
    B, A = _arr(B), _arr(A)
    if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ShapeError(f"B {B.shape} and A {A.shape} do not share a rank dimension")
    r = B.shape[1]
    return _cosine_matrix([B[:, i:i + 1] for i in range(r)], [A[i:i + 1, :] for i in range(r)])


def flattened_cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Brute-force cosine between two matrices flattened to 1-D."""
    u, v = np.ravel(u), np.ravel(v)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def _offdiag(m: np.ndarray) -> np.ndarray:
    vals = m[~np.eye(len(m), dtype=bool)]
    return vals[~np.isnan(vals)]


@dataclass
class SimilarityReport:
    per_block: list[np.ndarray]
    block_means: list[float]
    block_abs_means: list[float]

    @property
    def model_mean(self) -> float:
        return _nanmean(self.block_means)

    @property
    def model_abs_mean(self) -> float:
        return _nanmean(self.block_abs_means)


def _nanmean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


_ADAPTER_KEY = re.compile(r"^blocks\.(\d+)\.adapter\.(\d+)\.(b|a|lambda)$")


def _banks_from_state(state: Mapping[str, np.ndarray]) -> list[tuple[list, list]]:
    found: dict[int, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in state.items():
        m = _ADAPTER_KEY.match(name)
        if m:
            found.setdefault(int(m[1]), {}).setdefault(int(m[2]), {})[m[3]] = np.asarray(arr, dtype=np.float64)
    if not found:
        raise FormatError("no adapters present")
    blocks = []
    for l in range(max(found) + 1):
        if l not in found:
            raise FormatError(f"adapter tensors missing for block {l}")
        experts = found[l]
        if sorted(experts) != list(range(len(experts))) or any({"a", "b"} - set(e) for e in experts.values()):
            raise FormatError(f"incomplete expert set in block {l}")
        bs = [experts[i]["b"] for i in range(len(experts))]
        as_ = [experts[i]["a"] for i in range(len(experts))]
        if len(bs) == 1 and bs[0].shape[1] > 1:
            # a single rank-r pair is a plain LoRA update: compare its rank-1 pieces
            B, A = bs[0], as_[0]
            bs = [B[:, i:i + 1] for i in range(B.shape[1])]
            as_ = [A[i:i + 1, :] for i in range(A.shape[0])]
        blocks.append((bs, as_))
    return blocks


def model_similarity(checkpoint) -> SimilarityReport:
    """Per-block cosine matrices and their off-diagonal means.

    ``checkpoint`` is a model with adapters or a mapping of named tensors as
    stored in a checkpoint. Undefined (zero-expert) entries are excluded
    from every mean.
    """
    if isinstance(checkpoint, Mapping):
        blocks = _banks_from_state(checkpoint)
    else:
        state = checkpoint.adapter_tensors()
        n_blocks = len(checkpoint.blocks)
        blocks = _banks_from_state(state)
        if len(blocks) != n_blocks:
            raise FormatError(f"adapters cover {len(blocks)} of {n_blocks} blocks")
    per_block, means, abs_means = [], [], []
    for bs, as_ in blocks:
        cos = _cosine_matrix(bs, as_)
        vals = _offdiag(cos)
        per_block.append(cos)
        means.append(float(vals.mean()) if vals.size else float("nan"))
        abs_means.append(float(np.abs(vals).mean()) if vals.size else float("nan"))
    return SimilarityReport(per_block, means, abs_means)


# -- report files --------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


def write_report(report: SimilarityReport, out_dir, svg: bool = True) -> list[Path]:
    """Write ``block_<l>.csv`` (i,j,cosine), ``summary.csv`` and optional SVG heatmaps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for l, cos in enumerate(report.per_block):
        path = out / f"block_{l}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "cosine"])
            for i in range(len(cos)):
                for j in range(len(cos)):
                    w.writerow([i, j, _fmt(cos[i, j])])
        written.append(path)
        if svg:
            svg_path = out / f"block_{l}.svg"
            svg_path.write_text(render_heatmap_svg(cos, title=f"block {l}"))
            written.append(svg_path)
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "mean_signed", "mean_abs"])
        for l, (m, a) in enumerate(zip(report.block_means, report.block_abs_means)):
            w.writerow([l, _fmt(m), _fmt(a)])
        w.writerow(["model", _fmt(report.model_mean), _fmt(report.model_abs_mean)])
    written.append(path)
    return written


def _color(v: float) -> str:
    # blue (-1) -> white (0) -> red (+1); grey for undefined
    if np.isnan(v):
        return "#bbbbbb"
    t = float(np.clip(v, -1.0, 1.0))
    if t >= 0:
        g = int(round(255 * (1 - t)))
        return f"#ff{g:02x}{g:02x}"
    g = int(round(255 * (1 + t)))
    return f"#{g:02x}{g:02x}ff"


def render_heatmap_svg(cos: np.ndarray, cell: int = 24, title: str = "") -> str:
    """Confusion-matrix style SVG of a cosine matrix."""
    r = len(cos)
    pad = 20
    size = pad + r * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">']
    if title:
        parts.append(f'<title>{title}</title>')
    for i in range(r):
        parts.append(f'<text x="{pad + i * cell + cell // 2}" y="14" font-size="10" '
                     f'text-anchor="middle">{i}</text>')
        parts.append(f'<text x="10" y="{pad + i * cell + cell // 2 + 4}" font-size="10" '
                     f'text-anchor="middle">{i}</text>')
        for j in range(r):
            v = cos[i, j]
            parts.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_color(v)}"><title>{i},{j}: {_fmt(v)}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
