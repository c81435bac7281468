"""Binary message protocol between the coordinator and the workers.

Every message travels as one frame:

    [payload length: u32 LE] [kind tag: u8] [sender id: u32 LE] [payload]

The length counts payload bytes only, so the frame is 9 + length bytes and
an empty-payload message (Shutdown) is exactly 9 bytes.  Payloads are built
from little-endian 64-bit scalars: unsigned integers ("<u8"), IEEE doubles
("<f8"), vectors as [length u64][data], and matrices as
[rows u64][cols u64][data in column-major order].  The Gram and F operator
payloads are square, so they carry a single dimension prefix: n=3 gives
8 + 9*8 payload bytes.

Sender 0 is the coordinator; workers use their 1-based machine id.  Message
equality is bit-exact (floats compared by their byte patterns), which is
what makes "deserialize(serialize(m)) == m" a meaningful round-trip law and
lets the in-process transport prove it on every message it delivers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from enum import IntEnum
from typing import Union

import numpy as np
from numpy.typing import NDArray

from .errors import LengthMismatch, TruncatedFrame, UnknownKind

HEADER = struct.Struct("<IBI")
HEADER_SIZE = HEADER.size  # 9 bytes

COORDINATOR = 0  # sender id reserved for the coordinator

# error codes carried by Error payloads
ERR_BAD_FRAME = 1  # frame could not be parsed at all
ERR_BAD_STATE = 2  # well-formed message arrived out of order
ERR_INTERNAL = 3  # worker-side computation failed


class MessageKind(IntEnum):
    ASSIGN_FEATURES = 1
    GRAM_CONTRIBUTION = 2
    F_OPERATOR = 3
    LOCAL_SELECTION = 4
    FITTED_VALUES = 5
    REFINE_REQUEST = 6
    TEST_REQUEST = 7
    TEST_BLOCK = 8
    SHUTDOWN = 9
    ERROR = 10


# ------------------------------------------------------------- field helpers


def _as_f8_vector(v) -> NDArray[np.float64]:
    out = np.ascontiguousarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"expected a vector, got shape {out.shape}")
    return out


def _as_u64_vector(v) -> NDArray[np.uint64]:
    out = np.ascontiguousarray(v, dtype=np.uint64)
    if out.ndim != 1:
        raise ValueError(f"expected a vector, got shape {out.shape}")
    return out


def _as_f8_matrix(v) -> NDArray[np.float64]:
    out = np.ascontiguousarray(v, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {out.shape}")
    return out


class _BitEq:
    """Field-by-field equality where floats and arrays compare bit-exactly."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        for f in fields(self):  # type: ignore[arg-type]
            a = getattr(self, f.name)
            b = getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
            elif isinstance(a, float):
                if struct.pack("<d", a) != struct.pack("<d", b):
                    return False
            elif a != b:
                return False
        return True

    def __hash__(self):  # pragma: no cover - messages are not dict keys
        return id(self)


# ------------------------------------------------------------------ payloads


@dataclass(frozen=True, eq=False)
class AssignFeatures(_BitEq):
    """Coordinator -> worker: the worker's slice of the problem.

    x_cols holds the raw covariate columns (n rows, one column per assigned
    feature, ordered like global_indices); the worker builds its own basis.
    expect_f tells the worker whether an F operator broadcast will follow
    its Gram contribution or the identity should be used right away.
    """

    sender: int
    machine: int
    d_n: int
    expect_f: bool
    cv_seed: int
    folds: int
    global_indices: NDArray[np.uint64]
    y: NDArray[np.float64]
    x_cols: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "global_indices", _as_u64_vector(self.global_indices))
        object.__setattr__(self, "y", _as_f8_vector(self.y))
        object.__setattr__(self, "x_cols", _as_f8_matrix(self.x_cols))
        if self.x_cols.shape != (self.y.size, self.global_indices.size):
            raise ValueError(
                f"x_cols shape {self.x_cols.shape} does not match "
                f"n={self.y.size}, p_i={self.global_indices.size}"
            )

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p_i(self) -> int:
        return self.global_indices.size


@dataclass(frozen=True, eq=False)
class GramContribution(_BitEq):
    """Worker -> coordinator: its n×n share of the aggregated Gram."""

    sender: int
    gram: NDArray[np.float64]

    def __post_init__(self):
        g = _as_f8_matrix(self.gram)
        if g.shape[0] != g.shape[1]:
            raise ValueError(f"Gram must be square, got {g.shape}")
        object.__setattr__(self, "gram", g)


@dataclass(frozen=True, eq=False)
class FOperator(_BitEq):
    """Coordinator -> workers: the decorrelation operator, broadcast once."""

    sender: int
    f_matrix: NDArray[np.float64]

    def __post_init__(self):
        f = _as_f8_matrix(self.f_matrix)
        if f.shape[0] != f.shape[1]:
            raise ValueError(f"F must be square, got {f.shape}")
        object.__setattr__(self, "f_matrix", f)


@dataclass(frozen=True, eq=False)
class SelectionRecord(_BitEq):
    """Everything the coordinator needs about one selected feature.

    beta is the local solution in standardized-basis coordinates; psi_std
    is the standardized basis block itself (n × d_eff), pushed so the
    refinement step never re-reads covariate data.  The basis description
    (degree, knots, boundary, standardization constants) reconstructs the
    fitted component function at fresh points.
    """

    global_j: int
    local_k: int
    degree: int
    interior_knots: NDArray[np.float64]
    boundary_lo: float
    boundary_hi: float
    col_means: NDArray[np.float64]
    col_sds: NDArray[np.float64]
    beta: NDArray[np.float64]
    psi_std: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "interior_knots", _as_f8_vector(self.interior_knots))
        object.__setattr__(self, "col_means", _as_f8_vector(self.col_means))
        object.__setattr__(self, "col_sds", _as_f8_vector(self.col_sds))
        object.__setattr__(self, "beta", _as_f8_vector(self.beta))
        object.__setattr__(self, "psi_std", _as_f8_matrix(self.psi_std))
        d = self.beta.size
        if not (self.col_means.size == self.col_sds.size == d == self.psi_std.shape[1]):
            raise ValueError(f"inconsistent block widths for feature {self.global_j}")

    @property
    def d_eff(self) -> int:
        return self.beta.size


@dataclass(frozen=True, eq=False)
class LocalSelection(_BitEq):
    """Worker -> coordinator: the locally selected features, with payloads."""

    sender: int
    records: tuple[SelectionRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(r.global_j for r in self.records)


@dataclass(frozen=True, eq=False)
class FittedValues(_BitEq):
    """Worker -> coordinator: its fitted vector plus solver diagnostics.

    y_hat lives in original row space (standardized basis times beta, no F),
    so the coordinator can form the residual for variance estimation by
    plain summation across workers.
    """

    sender: int
    p_i: int
    sweeps: int
    converged: bool
    n_collapsed: int
    lam: float
    y_hat: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "y_hat", _as_f8_vector(self.y_hat))


@dataclass(frozen=True, eq=False)
class RefineRequest(_BitEq):
    """Coordinator -> worker: re-send selection records for these features."""

    sender: int
    features: NDArray[np.uint64]

    def __post_init__(self):
        object.__setattr__(self, "features", _as_u64_vector(self.features))


@dataclass(frozen=True, eq=False)
class TestRequest(_BitEq):
    """Coordinator -> worker: send test blocks for these global features."""

    sender: int
    features: NDArray[np.uint64]

    def __post_init__(self):
        object.__setattr__(self, "features", _as_u64_vector(self.features))


@dataclass(frozen=True, eq=False)
class TestRecord(_BitEq):
    """One feature's pieces for the debiased test: beta and Ψ̃ block.

    beta is all-zero when the local fit dropped the feature; the tilde
    block is the decorrelated standardized basis (F already applied).
    """

    global_j: int
    beta: NDArray[np.float64]
    psi_tilde: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_f8_vector(self.beta))
        object.__setattr__(self, "psi_tilde", _as_f8_matrix(self.psi_tilde))
        if self.psi_tilde.shape[1] != self.beta.size:
            raise ValueError(f"inconsistent block widths for feature {self.global_j}")

    @property
    def d_eff(self) -> int:
        return self.beta.size


@dataclass(frozen=True, eq=False)
class TestBlock(_BitEq):
    sender: int
    records: tuple[TestRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True, eq=False)
class Shutdown(_BitEq):
    sender: int


@dataclass(frozen=True, eq=False)
class Error(_BitEq):
    sender: int
    code: int
    message: str


Message = Union[
    AssignFeatures,
    GramContribution,
    FOperator,
    LocalSelection,
    FittedValues,
    RefineRequest,
    TestRequest,
    TestBlock,
    Shutdown,
    Error,
]

KIND_OF: dict[type, MessageKind] = {
    AssignFeatures: MessageKind.ASSIGN_FEATURES,
    GramContribution: MessageKind.GRAM_CONTRIBUTION,
    FOperator: MessageKind.F_OPERATOR,
    LocalSelection: MessageKind.LOCAL_SELECTION,
    FittedValues: MessageKind.FITTED_VALUES,
    RefineRequest: MessageKind.REFINE_REQUEST,
    TestRequest: MessageKind.TEST_REQUEST,
    TestBlock: MessageKind.TEST_BLOCK,
    Shutdown: MessageKind.SHUTDOWN,
    Error: MessageKind.ERROR,
}


def kind_of(msg: Message) -> MessageKind:
    return KIND_OF[type(msg)]


# ------------------------------------------------------------------- writing


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u64(self, value: int):
        if not 0 <= value < 2**64:
            raise ValueError(f"u64 out of range: {value}")
        self.parts.append(struct.pack("<Q", value))

    def f64(self, value: float):
        self.parts.append(struct.pack("<d", value))

    def vec_f8(self, v: NDArray[np.float64]):
        self.u64(v.size)
        self.parts.append(v.astype("<f8", copy=False).tobytes())

    def vec_u64(self, v: NDArray[np.uint64]):
        self.u64(v.size)
        self.parts.append(v.astype("<u8", copy=False).tobytes())

    def mat_f8(self, m: NDArray[np.float64]):
        self.u64(m.shape[0])
        self.u64(m.shape[1])
        self.parts.append(m.astype("<f8", copy=False).tobytes(order="F"))

    def square_f8(self, m: NDArray[np.float64]):
        # single dimension prefix; used by the Gram and F payloads
        self.u64(m.shape[0])
        self.parts.append(m.astype("<f8", copy=False).tobytes(order="F"))

    def utf8(self, s: str):
        raw = s.encode("utf-8")
        self.u64(len(raw))
        self.parts.append(raw)

    def payload(self) -> bytes:
        return b"".join(self.parts)


def _write_selection_record(w: _Writer, r: SelectionRecord):
    w.u64(r.global_j)
    w.u64(r.local_k)
    w.u64(r.degree)
    w.vec_f8(r.interior_knots)
    w.f64(r.boundary_lo)
    w.f64(r.boundary_hi)
    w.vec_f8(r.col_means)
    w.vec_f8(r.col_sds)
    w.vec_f8(r.beta)
    w.mat_f8(r.psi_std)


def serialize(msg: Message) -> bytes:
    """Encode a message into one self-delimiting frame."""
    try:
        kind = KIND_OF[type(msg)]
    except KeyError:
        raise UnknownKind(f"not a protocol message: {type(msg).__name__}") from None
    w = _Writer()
    if kind is MessageKind.ASSIGN_FEATURES:
        w.u64(msg.machine)
        w.u64(msg.d_n)
        w.u64(1 if msg.expect_f else 0)
        w.u64(msg.cv_seed)
        w.u64(msg.folds)
        w.vec_u64(msg.global_indices)
        w.vec_f8(msg.y)
        w.mat_f8(msg.x_cols)
    elif kind is MessageKind.GRAM_CONTRIBUTION:
        w.square_f8(msg.gram)
    elif kind is MessageKind.F_OPERATOR:
        w.square_f8(msg.f_matrix)
    elif kind is MessageKind.LOCAL_SELECTION:
        w.u64(len(msg.records))
        for r in msg.records:
            _write_selection_record(w, r)
    elif kind is MessageKind.FITTED_VALUES:
        w.u64(msg.p_i)
        w.u64(msg.sweeps)
        w.u64(1 if msg.converged else 0)
        w.u64(msg.n_collapsed)
        w.f64(msg.lam)
        w.vec_f8(msg.y_hat)
    elif kind in (MessageKind.REFINE_REQUEST, MessageKind.TEST_REQUEST):
        w.vec_u64(msg.features)
    elif kind is MessageKind.TEST_BLOCK:
        w.u64(len(msg.records))
        for r in msg.records:
            w.u64(r.global_j)
            w.vec_f8(r.beta)
            w.mat_f8(r.psi_tilde)
    elif kind is MessageKind.SHUTDOWN:
        pass
    else:  # Error
        w.u64(msg.code)
        w.utf8(msg.message)
    payload = w.payload()
    if not 0 <= msg.sender < 2**32:
        raise ValueError(f"sender id out of range: {msg.sender}")
    return HEADER.pack(len(payload), int(kind), msg.sender) + payload


# ------------------------------------------------------------------- reading


class _Reader:
    """Sequential payload decoder; any overrun or leftover is a frame bug."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _take(self, count: int) -> bytes:
        end = self.pos + count
        if end > len(self.buf):
            raise LengthMismatch(
                f"payload needs {end} bytes but frame carries {len(self.buf)}"
            )
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def vec_f8(self) -> NDArray[np.float64]:
        size = self.u64()
        return np.frombuffer(self._take(8 * size), dtype="<f8").copy()

    def vec_u64(self) -> NDArray[np.uint64]:
        size = self.u64()
        return np.frombuffer(self._take(8 * size), dtype="<u8").copy()

    def mat_f8(self) -> NDArray[np.float64]:
        rows = self.u64()
        cols = self.u64()
        flat = np.frombuffer(self._take(8 * rows * cols), dtype="<f8")
        return np.ascontiguousarray(flat.reshape((rows, cols), order="F"))

    def square_f8(self) -> NDArray[np.float64]:
        n = self.u64()
        flat = np.frombuffer(self._take(8 * n * n), dtype="<f8")
        return np.ascontiguousarray(flat.reshape((n, n), order="F"))

    def utf8(self) -> str:
        size = self.u64()
        return self._take(size).decode("utf-8")

    def finish(self):
        if self.pos != len(self.buf):
            raise LengthMismatch(
                f"{len(self.buf) - self.pos} unread bytes at the end of the payload"
            )


def _read_selection_record(r: _Reader) -> SelectionRecord:
    return SelectionRecord(
        global_j=r.u64(),
        local_k=r.u64(),
        degree=r.u64(),
        interior_knots=r.vec_f8(),
        boundary_lo=r.f64(),
        boundary_hi=r.f64(),
        col_means=r.vec_f8(),
        col_sds=r.vec_f8(),
        beta=r.vec_f8(),
        psi_std=r.mat_f8(),
    )


def deserialize(buf: bytes) -> Message:
    """Decode one complete frame; the buffer must hold exactly one frame."""
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrame(f"frame header needs {HEADER_SIZE} bytes, got {len(buf)}")
    length, tag, sender = HEADER.unpack_from(buf)
    try:
        kind = MessageKind(tag)
    except ValueError:
        raise UnknownKind(f"unknown kind tag {tag}") from None
    if len(buf) < HEADER_SIZE + length:
        raise TruncatedFrame(
            f"frame claims {length} payload bytes, only {len(buf) - HEADER_SIZE} present"
        )
    if len(buf) > HEADER_SIZE + length:
        raise LengthMismatch(f"{len(buf) - HEADER_SIZE - length} trailing bytes after frame")
    r = _Reader(buf[HEADER_SIZE:])
    msg: Message
    try:
        if kind is MessageKind.ASSIGN_FEATURES:
            machine = r.u64()
            d_n = r.u64()
            expect_f = r.u64() != 0
            cv_seed = r.u64()
            folds = r.u64()
            indices = r.vec_u64()
            y = r.vec_f8()
            x_cols = r.mat_f8()
            msg = AssignFeatures(
                sender=sender, machine=machine, d_n=d_n, expect_f=expect_f,
                cv_seed=cv_seed, folds=folds, global_indices=indices, y=y,
                x_cols=x_cols,
            )
        elif kind is MessageKind.GRAM_CONTRIBUTION:
            msg = GramContribution(sender=sender, gram=r.square_f8())
        elif kind is MessageKind.F_OPERATOR:
            msg = FOperator(sender=sender, f_matrix=r.square_f8())
        elif kind is MessageKind.LOCAL_SELECTION:
            count = r.u64()
            records = tuple(_read_selection_record(r) for _ in range(count))
            msg = LocalSelection(sender=sender, records=records)
        elif kind is MessageKind.FITTED_VALUES:
            msg = FittedValues(
                sender=sender, p_i=r.u64(), sweeps=r.u64(),
                converged=r.u64() != 0, n_collapsed=r.u64(), lam=r.f64(),
                y_hat=r.vec_f8(),
            )
        elif kind is MessageKind.REFINE_REQUEST:
            msg = RefineRequest(sender=sender, features=r.vec_u64())
        elif kind is MessageKind.TEST_REQUEST:
            msg = TestRequest(sender=sender, features=r.vec_u64())
        elif kind is MessageKind.TEST_BLOCK:
            count = r.u64()
            records = tuple(
                TestRecord(global_j=r.u64(), beta=r.vec_f8(), psi_tilde=r.mat_f8())
                for _ in range(count)
            )
            msg = TestBlock(sender=sender, records=records)
        elif kind is MessageKind.SHUTDOWN:
            msg = Shutdown(sender=sender)
        else:
            msg = Error(sender=sender, code=r.u64(), message=r.utf8())
    except ValueError as exc:
        # a field-level inconsistency means the frame lied about its layout
        raise LengthMismatch(str(exc)) from exc
    r.finish()
    return msg


def roundtrip(msg: Message) -> Message:
    """serialize then deserialize; the transport-independence workhorse."""
    return deserialize(serialize(msg))
