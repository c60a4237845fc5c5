"""Core token containers: codec matrices, spans, special markers, dumps.

The currency of the whole system is the T-by-K codec matrix: T temporal
frames, each holding one token id per residual codebook.  Frames are kept
as an integer numpy array; all transforms in :mod:`codec_infill.rearrange`
operate on these exact integers, never on floats.

The on-disk dump format is line-delimited JSON, one utterance per line:

    {"id": ..., "frame_rate": ..., "codebook_sizes": [...],
     "frames": [[k ids] per frame], "spans": [[start, end], ...]}

``spans`` is optional.  All values are exact integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidSpanError

# Filler id occupying stacked slots that the delay pattern leaves without a
# real token.  Never appears inside a CodecMatrix or a rearranged sequence.
EMPTY = -1


@dataclass(frozen=True)
class SpecialToken:
    """Marker token: mask(i) introducing span i, end-of-span, end-of-utterance.

    Mask indices are 1-based and assigned left-to-right, so the leftmost
    masked span always carries mask index 1.
    """

    kind: str  # "mask" | "eos" | "eou"
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("mask", "eos", "eou"):
            raise InvalidInputError(f"unknown special token kind {self.kind!r}")
        if self.kind == "mask" and self.index < 1:
            raise InvalidInputError("mask token indices are 1-based")

    def __str__(self):
        if self.kind == "mask":
            return f"<M{self.index}>"
        return self.kind.upper()


EOS = SpecialToken("eos")
EOU = SpecialToken("eou")


def mask_marker(index: int) -> SpecialToken:
    return SpecialToken("mask", index)


@dataclass(frozen=True)
class Span:
    """Half-open frame range [start, end) within a codec matrix."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise InvalidSpanError(f"span [{self.start}, {self.end}) is empty or negative")

    def __len__(self):
        return self.end - self.start


def validate_spans(spans: list[Span], num_frames: int) -> None:
    """Check that spans are sorted, pairwise disjoint, and within [0, T)."""
    prev_end = 0
    for s in spans:
        if s.start < prev_end:
            raise InvalidSpanError(f"span [{s.start}, {s.end}) overlaps or is out of order")
        if s.end > num_frames:
            raise InvalidSpanError(f"span [{s.start}, {s.end}) exceeds frame count {num_frames}")
        prev_end = s.end


@dataclass
class CodecMatrix:
    """T x K matrix of codec token ids plus vocabulary metadata."""

    frames: np.ndarray  # (T, K) integer array
    frame_rate: int = 50
    codebook_sizes: tuple[int, ...] = (256, 256, 256, 256)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        if self.frames.ndim != 2:
            if self.frames.size == 0:
                self.frames = self.frames.reshape(0, len(self.codebook_sizes))
            else:
                raise InvalidInputError("frames must be a (T, K) array")
        if self.frames.shape[1] != len(self.codebook_sizes):
            raise InvalidInputError(
                f"frames have {self.frames.shape[1]} codebooks, "
                f"expected {len(self.codebook_sizes)}"
            )
        if self.num_codebooks < 1:
            raise InvalidInputError("need at least one codebook")
        for k, size in enumerate(self.codebook_sizes):
            col = self.frames[:, k]
            if col.size and (col.min() < 0 or col.max() >= size):
                raise InvalidInputError(
                    f"codebook {k + 1} token out of range [0, {size})"
                )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_codebooks(self) -> int:
        return len(self.codebook_sizes)

    def __eq__(self, other):
        return (
            isinstance(other, CodecMatrix)
            and self.frame_rate == other.frame_rate
            and self.codebook_sizes == other.codebook_sizes
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


# ---------------------------------------------------------------------------
# Line-delimited token dumps
# ---------------------------------------------------------------------------


@dataclass
class TokenDumpRecord:
    id: str
    matrix: CodecMatrix
    spans: list[Span] = field(default_factory=list)


def dump_record_to_json(record: TokenDumpRecord) -> str:
    payload = {
        "id": record.id,
        "frame_rate": record.matrix.frame_rate,
        "codebook_sizes": list(record.matrix.codebook_sizes),
        "frames": record.matrix.frames.tolist(),
    }
    if record.spans:
        payload["spans"] = [[s.start, s.end] for s in record.spans]
    return json.dumps(payload, separators=(",", ":"), sort_keys=True)


def dump_record_from_json(line: str) -> TokenDumpRecord:
    payload = json.loads(line)
    sizes = tuple(int(v) for v in payload["codebook_sizes"])
    frames = np.asarray(payload["frames"], dtype=np.int64)
    if frames.size == 0:
        frames = frames.reshape(0, len(sizes))
    matrix = CodecMatrix(frames, frame_rate=int(payload["frame_rate"]), codebook_sizes=sizes)
    spans = [Span(int(a), int(b)) for a, b in payload.get("spans", [])]
    return TokenDumpRecord(str(payload["id"]), matrix, spans)


def write_token_dump(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dump_record_to_json(record) + "\n")


def read_token_dump(path) -> list[TokenDumpRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(dump_record_from_json(line))
    return records
