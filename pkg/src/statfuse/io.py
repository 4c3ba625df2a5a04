"""File formats: binary tensors, manifests and text model files.

Tensor file layout (all integers little-endian)::

    offset 0        8 bytes   magic b"SFTENS01"
    offset 8        u32       rank r
    offset 12       r x u64   dims, outermost first
    offset 12+8r    u8        dtype tag: 1 = float32, 2 = uint16
    offset 13+8r    payload   row-major, little-endian

Score maps are rank 3 ``(K, H, W)`` float32, label maps rank 2 ``(H, W)``
uint16 and Monte-Carlo sample stacks rank 4 ``(T, K, H, W)`` float32.  In
memory the class axis is last; the readers and writers transpose.

The model file grammar is documented in ``docs/formats.md``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from statfuse.core import ClassPrior, ClassSet, ExpertModel, FusionModel
from statfuse.errors import DomainError, FormatError, ParseError, StatfuseError
from statfuse.numerics import clip_probs

MAGIC = b"SFTENS01"
DTYPE_FLOAT32 = 1
DTYPE_UINT16 = 2
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT16: np.dtype("<u2")}
READ_SIMPLEX_TOL = 1e-3
TENSOR_SUFFIX = ".sft"

MODEL_HEADER = "statfuse-model v1"


# ---------------------------------------------------------------------------
# tensors


def encode_tensor(array: np.ndarray, dtype_tag: int) -> bytes:
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype_tag])
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + struct.pack("<B", dtype_tag) + arr.tobytes(order="C")


def decode_tensor(data: bytes, path=None) -> tuple[np.ndarray, int]:
    """Parse tensor bytes; returns the raw array in file order and its dtype tag."""
    if len(data) < 8 or data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", path, 0)
    if len(data) < 12:
        raise FormatError("truncated rank field", path, 8)
    (rank,) = struct.unpack_from("<I", data, 8)
    if rank == 0 or rank > 8:
        raise FormatError(f"unsupported rank {rank}", path, 8)
    dims_end = 12 + 8 * rank
    if len(data) < dims_end + 1:
        raise FormatError("truncated header", path, len(data))
    dims = struct.unpack_from(f"<{rank}Q", data, 12)
    tag = data[dims_end]
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", path, dims_end)
    dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    start = dims_end + 1
    expected = count * dtype.itemsize
    have = len(data) - start
    if have < expected:
        raise FormatError(f"payload truncated: {have} of {expected} bytes", path, len(data))
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", path, start + expected)
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=start).reshape(dims)
    return arr, tag


def _check_simplex(arr: np.ndarray, path) -> np.ndarray:
    y = arr.astype(np.float64)
    bad = ~np.isfinite(y).all(axis=-1) | (y < 0).any(axis=-1) | (np.abs(y.sum(axis=-1) - 1.0) > READ_SIMPLEX_TOL)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        total = y[where].sum()
        raise FormatError(f"element {where} is not on the simplex (sum {total:.6g})", path)
    return clip_probs(y)


def write_tensor(path, array: np.ndarray) -> None:
    """Write an in-memory map in the tensor layout.

    Integer arrays ``(H, W)`` become label maps; float arrays ``(H, W, K)``
    score maps and ``(T, H, W, K)`` sample stacks.
    """
    arr = np.asarray(array)
    if np.issubdtype(arr.dtype, np.integer):
        if arr.ndim != 2:
            raise DomainError(f"label maps must be (H, W), got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise DomainError("labels must fit in uint16")
        data = encode_tensor(arr, DTYPE_UINT16)
    elif arr.ndim == 3:
        data = encode_tensor(np.moveaxis(arr, -1, 0), DTYPE_FLOAT32)
    elif arr.ndim == 4:
        data = encode_tensor(np.moveaxis(arr, -1, 1), DTYPE_FLOAT32)
    else:
        raise DomainError(f"cannot store a float array of shape {arr.shape}")
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Load a tensor file into the in-memory layout.

    Label maps come back as int64 ``(H, W)``.  Score maps ``(H, W, K)`` and
    stacks ``(T, H, W, K)`` are checked against the simplex (tolerance 1e-3)
    and then clipped and renormalised in float64.
    """
    data = Path(path).read_bytes()
    arr, tag = decode_tensor(data, path)
    if tag == DTYPE_UINT16:
        if arr.ndim != 2:
            raise FormatError(f"label tensors must be rank 2, got rank {arr.ndim}", path, 8)
        return arr.astype(np.int64)
    if arr.ndim == 3:
        return _check_simplex(np.moveaxis(arr, 0, -1), path)
    if arr.ndim == 4:
        return _check_simplex(np.moveaxis(arr, 1, -1), path)
    raise FormatError(f"score tensors must be rank 3 or 4, got rank {arr.ndim}", path, 8)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    """Expert score directories plus one ground-truth directory."""

    experts: dict[str, Path]
    gt: Path
    path: Path | None = None

    def basenames(self) -> list[str]:
        names = sorted(p.name for p in self.gt.glob(f"*{TENSOR_SUFFIX}"))
        for eid, d in self.experts.items():
            for name in names:
                if not (d / name).is_file():
                    raise FormatError(f"expert {eid!r} has no scores for {name} in {d}", self.path)
        return names


def read_manifest(path) -> Manifest:
    path = Path(path)
    experts: dict[str, Path] = {}
    gt = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError("expected '<id><TAB><directory>'", path, lineno)
        key, d = parts
        target = (path.parent / d).resolve() if not Path(d).is_absolute() else Path(d)
        if key == "gt":
            if gt is not None:
                raise ParseError("more than one gt line", path, lineno)
            gt = target
        else:
            if key in experts:
                raise ParseError(f"duplicate expert {key!r}", path, lineno)
            experts[key] = target
    if gt is None:
        raise ParseError("missing gt line", path)
    if not experts:
        raise ParseError("no expert lines", path)
    return Manifest(experts, gt, path)


def write_manifest(path, experts: dict[str, str], gt: str) -> None:
    lines = [f"{eid}\t{d}" for eid, d in experts.items()] + [f"gt\t{gt}"]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# model files


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def format_model(model: FusionModel) -> str:
    k = model.num_classes
    cs = model.class_set
    out = [
        MODEL_HEADER,
        f"classes {k}",
        "names\t" + "\t".join(cs.names),
        f"ignore_index {'none' if cs.ignore_index is None else cs.ignore_index}",
        f"beta {_fmt(model.beta)}",
        f"delta {_fmt(model.delta)}",
        f"smoothing {_fmt(model.smoothing)}",
        "prior " + " ".join(_fmt(v) for v in model.prior.log_probs),
    ]
    for eid, em in model.experts.items():
        out.append(f"expert {eid}")
        out.append("confusion")
        out.extend(" ".join(str(int(c)) for c in row) for row in em.confusion)
        out.append("absent " + (" ".join(str(a) for a in em.absent) if em.absent else "-"))
        if em.dirichlet is None:
            out.append("dirichlet none")
        else:
            out.append("dirichlet")
            out.extend(" ".join(_fmt(a) for a in row) for row in em.dirichlet)
        out.append("end")
    return "\n".join(out) + "\n"


def save_model(path, model: FusionModel) -> None:
    Path(path).write_text(format_model(model))


class _Lines:
    def __init__(self, text, path):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.i = 0
        self.path = path

    def error(self, msg, lineno=None):
        return ParseError(msg, self.path, self.i if lineno is None else lineno)

    def next(self, what):
        if self.i >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {what}", self.path, self.i + 1)
        self.i += 1
        return self.lines[self.i - 1]

    def keyword(self, key, what=None):
        line = self.next(what or f"'{key}' line")
        head, _, rest = line.partition("\t" if key == "names" else " ")
        if head != key:
            raise self.error(f"expected '{key}' line, got {line[:40]!r}")
        return rest

    def numbers(self, text, count, kind):
        parts = text.split()
        if len(parts) != count:
            raise self.error(f"expected {count} values, got {len(parts)}")
        try:
            return [kind(p) for p in parts]
        except ValueError as exc:
            raise self.error(str(exc)) from None


def parse_model(text: str, path=None) -> FusionModel:
    """Parse the text model format; every violation names its line."""
    ln = _Lines(text, path)
    if ln.next("header") != MODEL_HEADER:
        raise ln.error(f"expected header {MODEL_HEADER!r}")
    (k,) = ln.numbers(ln.keyword("classes"), 1, int)
    if k < 2:
        raise ln.error("need at least two classes")
    names = ln.keyword("names").split("\t")
    if len(names) != k:
        raise ln.error(f"expected {k} class names, got {len(names)}")
    ig = ln.keyword("ignore_index").strip()
    ignore = None if ig == "none" else ln.numbers(ig, 1, int)[0]
    (beta,) = ln.numbers(ln.keyword("beta"), 1, float)
    (delta,) = ln.numbers(ln.keyword("delta"), 1, float)
    (smoothing,) = ln.numbers(ln.keyword("smoothing"), 1, float)
    prior_vals = ln.numbers(ln.keyword("prior"), k, float)
    try:
        class_set = ClassSet(tuple(names), ignore)
        prior = ClassPrior(np.array(prior_vals))
    except StatfuseError as exc:
        raise ln.error(str(exc)) from None

    experts: dict[str, ExpertModel] = {}
    while ln.i < len(ln.lines):
        if not ln.lines[ln.i].strip():
            ln.i += 1
            continue
        eid = ln.keyword("expert").strip()
        if not eid or len(eid.split()) != 1:
            raise ln.error("expert id must be a single non-empty token")
        if eid in experts:
            raise ln.error(f"duplicate expert {eid!r}")
        ln.keyword("confusion", "'confusion' line")
        conf = [ln.numbers(ln.next("confusion row"), k, int) for _ in range(k)]
        absent_txt = ln.keyword("absent").strip()
        absent = () if absent_txt == "-" else tuple(ln.numbers(absent_txt, len(absent_txt.split()), int))
        head = ln.next("'dirichlet' line")
        if head == "dirichlet none":
            alphas = None
        elif head == "dirichlet":
            alphas = [ln.numbers(ln.next("dirichlet row"), k, float) for _ in range(k)]
        else:
            raise ln.error(f"expected 'dirichlet' or 'dirichlet none', got {head[:40]!r}")
        if ln.next("'end' line") != "end":
            raise ln.error("expected 'end'")
        try:
            experts[eid] = ExpertModel(np.array(conf), None if alphas is None else np.array(alphas), absent)
        except StatfuseError as exc:
            raise ln.error(f"expert {eid!r}: {exc}") from None
    if not experts:
        raise ParseError("model has no expert blocks", path, ln.i)
    try:
        return FusionModel(class_set, experts, prior, beta=beta, delta=delta, smoothing=smoothing)
    except StatfuseError as exc:
        raise ParseError(str(exc), path) from None


def load_model(path) -> FusionModel:
    path = Path(path)
    return parse_model(path.read_text(), path)
