"""Per-module weight-difference statistics between two checkpoints.

Two tensor-level statistics per (layer, role):

* ``l2``: Frobenius norm of the flattened difference ``W_adapted - W_base``.
* ``relative_ratio``: ``l2 / (||W_base||_F + eps)``, which does not care how
  large a module's weights are to begin with.

Histograms use the elementwise relative change
``(w_adapted - w_base) / (|w_base| + eps)`` pooled over layers per role.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import FormatError, PairingError, ShapeError, UsageError
from .naming import ROLE_ORDER, ModuleKey, ModuleRole, NamingScheme
from .tensor import as_matrix, frobenius_norm, sub

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-12
CSV_COLUMNS = ("layer", "role", "l2", "relative_ratio", "param_count", "nan_count")


class Statistic(enum.Enum):
    L2 = "l2"
    RELATIVE_RATIO = "relative_ratio"


class Aggregation(enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"
    MAX = "max"


def module_l2(w_base, w_adapted) -> float:
    return frobenius_norm(sub(w_adapted, w_base))


def relative_ratio(w_base, w_adapted, eps: float = DEFAULT_EPS) -> float:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    denom = frobenius_norm(w_base) + eps
    if denom == 0.0:
        raise ZeroDivisionError("relative_ratio: zero base norm with eps=0")
    return module_l2(w_base, w_adapted) / denom


@dataclass(frozen=True)
class DiffRecord:
    key: ModuleKey
    l2: float
    relative_ratio: float
    param_count: int
    nan_count: int = 0
    base_name: str = ""

    @property
    def ranked(self) -> bool:
        return self.nan_count == 0


@dataclass
class DiffMatrix:
    """``layers x roles`` grid; absent cells hold NaN and are reported as ``None``."""

    statistic: Statistic
    values: np.ndarray
    roles: tuple[ModuleRole, ...] = ROLE_ORDER

    @property
    def layers(self) -> int:
        return self.values.shape[0]

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def get(self, layer: int, role: ModuleRole) -> float | None:
        v = self.values[layer, self.roles.index(role)]
        return None if math.isnan(v) else float(v)

    def column(self, role: ModuleRole) -> np.ndarray:
        col = self.values[:, self.roles.index(role)]
        return col[~np.isnan(col)]

    def is_empty(self) -> bool:
        return self.values.size == 0 or not self.present.any()

    def to_lists(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]

    @classmethod
    def from_records(cls, records, statistic: Statistic, layers: int | None = None) -> "DiffMatrix":
        records = list(records)
        if layers is None:
            layers = max((r.key.layer for r in records), default=-1) + 1
        values = np.full((layers, len(ROLE_ORDER)), np.nan)
        for r in records:
            if r.ranked:
                values[r.key.layer, r.key.role.order] = getattr(r, statistic.value)
        return cls(statistic, values)


@dataclass
class DiffResult:
    l2: DiffMatrix
    ratio: DiffMatrix
    records: list[DiffRecord]
    eps: float
    unclassified: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __iter__(self):
        # allows ``l2, ratio, records = diff_checkpoints(...)``
        return iter((self.l2, self.ratio, self.records))


def _diff_one(base: Checkpoint, adapted: Checkpoint, key: ModuleKey, name: str, eps: float) -> DiffRecord:
    wb, wa = base.load_matrix(name), adapted.load_matrix(name)
    if wb.shape != wa.shape:
        raise ShapeError(f"{name}: shape mismatch {wb.shape} (base) vs {wa.shape} (adapted)")
    nan_count = int(np.isnan(wb).sum() + np.isnan(wa).sum())
    if nan_count:
        return DiffRecord(key, math.nan, math.nan, wb.size, nan_count, name)
    l2 = module_l2(wb, wa)
    denom = frobenius_norm(wb) + eps
    if denom > 0:
        ratio = l2 / denom
    else:
        ratio = 0.0 if l2 == 0 else math.inf
    return DiffRecord(key, l2, ratio, wb.size, 0, name)


def _classified(ckpt: Checkpoint, scheme: NamingScheme) -> tuple[dict[ModuleKey, str], list[str]]:
    keyed, other = {}, []
    for name in ckpt.names():
        key = scheme.classify(name)
        if key is None:
            other.append(name)
        elif key in keyed:
            raise PairingError(f"{ckpt.origin}: {name!r} and {keyed[key]!r} both classify as {key}")
        else:
            keyed[key] = name
    return keyed, other


def diff_checkpoints(base: Checkpoint, adapted: Checkpoint, scheme: NamingScheme,
                     eps: float = DEFAULT_EPS, threads: int | None = None) -> DiffResult:
    base_keys, unclassified = _classified(base, scheme)
    adapted_keys, _ = _classified(adapted, scheme)
    warnings = []
    missing = []
    pairs = []
    for key in sorted(base_keys):
        name = base_keys[key]
        if name not in adapted:
            missing.append(name)
            warnings.append(f"adapted checkpoint lacks {name!r}; cell {key} left absent")
            continue
        pairs.append((key, name))
    for key in sorted(set(adapted_keys) - set(base_keys)):
        missing.append(adapted_keys[key])
        warnings.append(f"base checkpoint lacks {adapted_keys[key]!r}; cell {key} left absent")
    if not pairs:
        raise PairingError("no classified tensors are shared between the two checkpoints")

    with ThreadPoolExecutor(max_workers=threads or 1) as pool:
        records = list(pool.map(lambda kn: _diff_one(base, adapted, kn[0], kn[1], eps), pairs))
    records.sort(key=lambda r: r.key)
    for r in records:
        if r.nan_count:
            warnings.append(f"{r.base_name}: {r.nan_count} NaN values; excluded from ranking")
    for w in warnings:
        log.warning(w)

    layers = max(k.layer for k in list(base_keys) + list(adapted_keys)) + 1
    return DiffResult(
        l2=DiffMatrix.from_records(records, Statistic.L2, layers),
        ratio=DiffMatrix.from_records(records, Statistic.RELATIVE_RATIO, layers),
        records=records,
        eps=eps,
        unclassified=unclassified,
        missing=missing,
        warnings=warnings,
    )


_AGG = {Aggregation.MEAN: np.mean, Aggregation.MEDIAN: np.median, Aggregation.MAX: np.max}


def rank_modules(dm: DiffMatrix, aggregation: Aggregation | str = Aggregation.MEAN) -> list[tuple[ModuleRole, float]]:
    """Roles sorted by aggregate over layers, largest first; ties keep q,k,v,o,gate,up,down order."""
    aggregation = Aggregation(aggregation)
    if dm.is_empty():
        raise ValueError("rank_modules: empty diff matrix")
    scored = []
    for role in dm.roles:
        col = dm.column(role)
        if col.size:
            scored.append((role, float(_AGG[aggregation](col))))
    scored.sort(key=lambda rv: (-rv[1], rv[0].order))
    return scored


@dataclass(frozen=True)
class RoleHistogram:
    role: ModuleRole
    bin_edges: np.ndarray
    counts: np.ndarray
    sampled: int
    total: int


def elementwise_relative_change(w_base, w_adapted, eps: float = DEFAULT_EPS) -> np.ndarray:
    wb, wa = as_matrix(w_base), as_matrix(w_adapted)
    if wb.shape != wa.shape:
        raise ShapeError(f"shape mismatch {wb.shape} vs {wa.shape}")
    return (wa - wb) / (np.abs(wb) + eps)


def stride_sample(values: np.ndarray, cap: int | None) -> np.ndarray:
    n = values.size
    if cap is None or n <= cap:
        return values
    idx = (np.arange(cap, dtype=np.int64) * n) // cap
    return values[idx]


def histogram_relative_changes(base: Checkpoint, adapted: Checkpoint, scheme: NamingScheme,
                               bins: int = 50, sample_cap: int | None = 1_000_000,
                               eps: float = DEFAULT_EPS,
                               value_range: tuple[float, float] | None = None) -> list[RoleHistogram]:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    base_keys, _ = _classified(base, scheme)
    per_role: dict[ModuleRole, list[np.ndarray]] = {}
    for key in sorted(base_keys):
        name = base_keys[key]
        if name not in adapted:
            continue
        wb, wa = base.load_matrix(name), adapted.load_matrix(name)
        if wb.shape != wa.shape:
            raise ShapeError(f"{name}: shape mismatch {wb.shape} vs {wa.shape}")
        per_role.setdefault(key.role, []).append(elementwise_relative_change(wb, wa, eps).ravel())
    if not per_role:
        raise PairingError("no classified tensors are shared between the two checkpoints")

    out = []
    for role in ROLE_ORDER:
        if role not in per_role:
            continue
        values = np.concatenate(per_role[role])
        values = values[np.isfinite(values)]
        sample = stride_sample(values, sample_cap)
        counts, edges = np.histogram(sample, bins=bins, range=value_range)
        out.append(RoleHistogram(role, edges, counts, int(sample.size), int(values.size)))
    return out


# --- reports ---------------------------------------------------------------

def _num(x: float) -> str:
    return repr(float(x))


def _json_num(x: float):
    return None if math.isnan(x) else float(x)


def report_rows(records: list[DiffRecord]) -> list[list[str]]:
    return [[str(r.key.layer), r.key.role.value, _num(r.l2), _num(r.relative_ratio),
             str(r.param_count), str(r.nan_count)] for r in records]


def report_csv(result: DiffResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(report_rows(result.records))
    return buf.getvalue()


def report_dict(result: DiffResult) -> dict:
    return {
        "schema": "gatescope.diff/1",
        "eps": result.eps,
        "layers": result.l2.layers,
        "roles": [r.value for r in result.l2.roles],
        "l2": result.l2.to_lists(),
        "relative_ratio": result.ratio.to_lists(),
        "records": [
            {"layer": r.key.layer, "role": r.key.role.value, "tensor": r.base_name,
             "l2": _json_num(r.l2), "relative_ratio": _json_num(r.relative_ratio),
             "param_count": r.param_count, "nan_count": r.nan_count}
            for r in result.records
        ],
        "ranking": {
            stat.value: {agg.value: [[role.value, v] for role, v in rank_modules(dm, agg)]
                         for agg in Aggregation} if not dm.is_empty() else {}
            for stat, dm in ((Statistic.L2, result.l2), (Statistic.RELATIVE_RATIO, result.ratio))
        },
        "unclassified": list(result.unclassified),
        "missing": list(result.missing),
        "warnings": list(result.warnings),
    }


def report_json(result: DiffResult) -> str:
    return json.dumps(report_dict(result), indent=2, sort_keys=True) + "\n"


def export_report(result: DiffResult, path, fmt: str = "csv") -> Path:
    fmt = fmt.lower()
    if fmt == "csv":
        text = report_csv(result)
    elif fmt == "json":
        text = report_json(result)
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.write_text(text)
    return path


def read_report_csv(path) -> list[DiffRecord]:
    """Parse a CSV written by ``export_report`` back into records."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise FormatError(f"{path}: expected CSV header {','.join(CSV_COLUMNS)}")
        records = []
        for lineno, row in enumerate(reader, 2):
            try:
                layer, role, l2, ratio, count, nans = row
                records.append(DiffRecord(ModuleKey(int(layer), ModuleRole.parse(role)),
                                          float(l2), float(ratio), int(count), int(nans)))
            except (ValueError, UsageError) as exc:
                raise FormatError(f"{path}:{lineno}: bad row {row!r} ({exc})") from None
    return records
