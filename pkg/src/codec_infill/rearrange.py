"""Two-step token rearrangement: span relocation and per-codebook delay.

Step 1 (``causal_mask``) relocates masked spans to the sequence tail so a
left-to-right model can condition on both sides of every masked region:

    X = (X1 .. XT),  masked spans S1..Sn   -->
    Y = U1 <M1> U2 <M2> ... U_{n+1} EOU <M1> D1 EOS <M2> D2 EOS ...

where Ui are the unmasked segments (possibly empty), Di the relocated
masked spans, <Mi> the mask marker of the i-th span in left-to-right
order, EOU terminates the unmasked region and every relocated span ends
with EOS.

Step 2 (``delay_stack``) shifts codebook k of every span by k-1 steps so
one decoding step emits K tokens while codebook k still appears after
codebook k-1 of the same physical frame.  A span of L frames becomes
L + K - 1 stacked steps; stacked step t holds, at codebook k (1-based),
the span's token at frame t - k + 1 when that frame exists and the EMPTY
filler otherwise.  Special markers are never delayed; an empty span
contributes K - 1 all-EMPTY steps, keeping the length formula uniform.

Both steps have exact inverses (``uncausal_mask``, ``unstack``) that parse
the layout grammar and raise :class:`StructureError` naming the first
violating item on malformed input.

All functions are pure; randomness enters only through an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, StructureError
from .tokens import EMPTY, EOS, EOU, CodecMatrix, Span, SpecialToken, mask_marker, validate_spans

FrameTuple = tuple[int, ...]


@dataclass(frozen=True)
class SpanRecord:
    """Bookkeeping row: one span's role, origin in X, and item range."""

    role: str  # "unmasked" | "masked"
    orig_start: int
    orig_end: int
    item_start: int
    item_end: int
    mask_index: int = 0  # 1-based for masked spans, 0 otherwise


@dataclass
class RearrangedSequence:
    """Span-relocated sequence: frame tuples interleaved with markers."""

    items: list  # FrameTuple | SpecialToken
    span_table: list[SpanRecord]
    frame_rate: int
    codebook_sizes: tuple[int, ...]

    @property
    def num_codebooks(self) -> int:
        return len(self.codebook_sizes)

    def __eq__(self, other):
        return (
            isinstance(other, RearrangedSequence)
            and self.items == other.items
            and self.codebook_sizes == other.codebook_sizes
        )


@dataclass
class StackedSequence:
    """Delay-patterned sequence: stacked steps interleaved with markers.

    Stacked steps are K-tuples over token ids plus the EMPTY filler (-1).
    """

    items: list  # FrameTuple (with EMPTY entries) | SpecialToken
    span_table: list[SpanRecord]
    frame_rate: int
    codebook_sizes: tuple[int, ...]

    @property
    def num_codebooks(self) -> int:
        return len(self.codebook_sizes)

    def __eq__(self, other):
        return (
            isinstance(other, StackedSequence)
            and self.items == other.items
            and self.codebook_sizes == other.codebook_sizes
        )


# ---------------------------------------------------------------------------
# Span sampling
# ---------------------------------------------------------------------------


@dataclass
class MaskSamplingConfig:
    """Training-time span sampler settings.

    The span count is Poisson(rate) truncated to [min_spans, max_spans];
    each span length is uniform on [1, min(max_span_len, T)].  The
    full-scale length cap is 600 frames; the desk-scale default is 60.
    """

    rate: float = 1.0
    min_spans: int = 1
    max_spans: int = 3
    max_span_len: int = 60
    seed: int | None = None

    def __post_init__(self):
        if not (1 <= self.min_spans <= self.max_spans):
            raise InvalidInputError("need 1 <= min_spans <= max_spans")
        if self.max_span_len < 1:
            raise InvalidInputError("max_span_len must be >= 1")
        if self.rate <= 0:
            raise InvalidInputError("rate must be positive")


def truncated_poisson_pmf(rate: float, lo: int, hi: int) -> np.ndarray:
    """Pmf of Poisson(rate) conditioned on lo <= n <= hi."""
    ns = np.arange(lo, hi + 1)
    weights = np.array([rate**n / math.factorial(n) for n in ns], dtype=np.float64)
    return weights / weights.sum()


def sample_span_count(cfg: MaskSamplingConfig, rng: np.random.Generator) -> int:
    pmf = truncated_poisson_pmf(cfg.rate, cfg.min_spans, cfg.max_spans)
    return int(rng.choice(np.arange(cfg.min_spans, cfg.max_spans + 1), p=pmf))


def place_spans(num_frames: int, lengths: list[int], rng: np.random.Generator) -> list[Span]:
    """Place spans of the given lengths uniformly among all disjoint layouts.

    The slack T - sum(lengths) is split over the n + 1 gaps around the
    spans by a uniform stars-and-bars draw, which induces the uniform
    distribution over ordered non-overlapping placements.
    """
    n = len(lengths)
    if n == 0:
        return []
    if any(l < 1 for l in lengths):
        raise InvalidInputError("span lengths must be >= 1")
    slack = num_frames - sum(lengths)
    if slack < 0:
        raise InvalidInputError("spans do not fit in the sequence")
    bars = np.sort(rng.choice(slack + n, size=n, replace=False))
    spans = []
    cursor = 0
    prev_bar = -1
    for i in range(n):
        gap = int(bars[i]) - prev_bar - 1
        start = cursor + gap
        spans.append(Span(start, start + lengths[i]))
        cursor = start + lengths[i]
        prev_bar = int(bars[i])
    return spans


def sample_mask_spans(
    num_frames: int, cfg: MaskSamplingConfig, rng: np.random.Generator
) -> list[Span]:
    """Draw the training-time mask spans for a T-frame utterance.

    If the sampled lengths cannot all fit, spans are dropped from the end
    of the draw until the remainder fits (a single span always fits since
    its length is capped at T).
    """
    if num_frames < 1:
        raise InvalidInputError("cannot sample spans for an empty sequence")
    max_len = min(cfg.max_span_len, num_frames)
    n = sample_span_count(cfg, rng)
    lengths = [int(v) for v in rng.integers(1, max_len + 1, size=n)]
    while n > 1 and sum(lengths[:n]) > num_frames:
        n -= 1
    return place_spans(num_frames, lengths[:n], rng)


# ---------------------------------------------------------------------------
# Causal masking and its inverse
# ---------------------------------------------------------------------------


def _frame_tuples(matrix: CodecMatrix) -> list[FrameTuple]:
    return [tuple(int(v) for v in row) for row in matrix.frames]


def causal_mask(matrix: CodecMatrix, spans: list[Span]) -> RearrangedSequence:
    """Relocate the masked spans of X to the tail of the sequence."""
    validate_spans(spans, matrix.num_frames)
    frames = _frame_tuples(matrix)
    items: list = []
    table: list[SpanRecord] = []

    cursor = 0
    for i, span in enumerate(spans, start=1):
        start = len(items)
        items.extend(frames[cursor:span.start])
        table.append(SpanRecord("unmasked", cursor, span.start, start, len(items)))
        items.append(mask_marker(i))
        cursor = span.end
    start = len(items)
    items.extend(frames[cursor:])
    table.append(SpanRecord("unmasked", cursor, matrix.num_frames, start, len(items)))
    items.append(EOU)

    for i, span in enumerate(spans, start=1):
        items.append(mask_marker(i))
        start = len(items)
        items.extend(frames[span.start:span.end])
        table.append(SpanRecord("masked", span.start, span.end, start, len(items), mask_index=i))
        items.append(EOS)

    return RearrangedSequence(items, table, matrix.frame_rate, matrix.codebook_sizes)


def _parse_rearranged(items: list):
    """Parse Y's layout grammar; returns (unmasked segments, relocated spans).

    Raises StructureError with the index of the first violating item.
    """
    segments: list[list[FrameTuple]] = [[]]
    pos = 0
    n_markers = 0
    while True:
        if pos >= len(items):
            raise StructureError("missing EOU terminator", len(items) - 1 if items else 0)
        item = items[pos]
        if isinstance(item, SpecialToken):
            if item.kind == "eou":
                pos += 1
                break
            if item.kind == "eos":
                raise StructureError("EOS before EOU", pos)
            if item.index != n_markers + 1:
                raise StructureError(
                    f"mask marker {item.index} out of order (expected {n_markers + 1})", pos
                )
            n_markers += 1
            segments.append([])
        else:
            segments[-1].append(item)
        pos += 1

    relocated: list[list[FrameTuple]] = []
    for i in range(1, n_markers + 1):
        if pos >= len(items):
            raise StructureError(f"dangling mask marker {i}: relocated span missing", pos - 1)
        marker = items[pos]
        if not (isinstance(marker, SpecialToken) and marker.kind == "mask" and marker.index == i):
            raise StructureError(f"expected relocated marker <M{i}>", pos)
        pos += 1
        span: list[FrameTuple] = []
        while True:
            if pos >= len(items):
                raise StructureError(f"relocated span {i} missing EOS", pos - 1)
            item = items[pos]
            if isinstance(item, SpecialToken):
                if item.kind == "eos":
                    if not span:
                        raise StructureError(f"relocated span {i} is empty", pos)
                    pos += 1
                    break
                raise StructureError(f"unexpected {item} inside relocated span {i}", pos)
            span.append(item)
            pos += 1
        relocated.append(span)
    if pos != len(items):
        if isinstance(items[pos], SpecialToken) and items[pos].kind == "eos":
            raise StructureError("unmatched EOS", pos)
        raise StructureError("trailing items after final relocated span", pos)
    return segments, relocated


def uncausal_mask(seq: RearrangedSequence) -> tuple[CodecMatrix, list[Span]]:
    """Exact inverse of :func:`causal_mask`."""
    segments, relocated = _parse_rearranged(seq.items)
    frames: list[FrameTuple] = []
    spans: list[Span] = []
    for i, segment in enumerate(segments):
        frames.extend(segment)
        if i < len(relocated):
            start = len(frames)
            frames.extend(relocated[i])
            spans.append(Span(start, len(frames)))
    arr = np.array(frames, dtype=np.int64) if frames else np.zeros((0, seq.num_codebooks), dtype=np.int64)
    matrix = CodecMatrix(arr, frame_rate=seq.frame_rate, codebook_sizes=seq.codebook_sizes)
    return matrix, spans


# ---------------------------------------------------------------------------
# Delayed stacking and its inverse
# ---------------------------------------------------------------------------


def stack_span(frames: list[FrameTuple], num_codebooks: int) -> list[FrameTuple]:
    """Apply the delay pattern to one span: L frames -> L + K - 1 steps.

    Step t carries, at codebook k (1-based), the token of frame t - k + 1;
    coordinates outside [0, L) hold the EMPTY filler.
    """
    k_count = num_codebooks
    length = len(frames)
    steps = []
    for t in range(length + k_count - 1):
        step = []
        for k in range(1, k_count + 1):
            f = t - k + 1
            step.append(frames[f][k - 1] if 0 <= f < length else EMPTY)
        steps.append(tuple(step))
    return steps


def unstack_span(steps: list[FrameTuple], num_codebooks: int, item_offset: int = 0) -> list[FrameTuple]:
    """Invert :func:`stack_span`, verifying the forced-EMPTY pattern.

    ``item_offset`` locates the run inside a larger item list so structure
    errors can name the absolute index of the offending step.
    """
    k_count = num_codebooks
    length = len(steps) - (k_count - 1)
    if length < 0:
        raise StructureError("stacked run shorter than the delay tail", item_offset)
    frames = [[0] * k_count for _ in range(length)]
    for t, step in enumerate(steps):
        if len(step) != k_count:
            raise StructureError(f"stacked step has {len(step)} slots, expected {k_count}", item_offset + t)
        for k in range(1, k_count + 1):
            f = t - k + 1
            token = step[k - 1]
            if 0 <= f < length:
                if token == EMPTY:
                    raise StructureError(
                        f"EMPTY at real coordinate (frame {f}, codebook {k})", item_offset + t
                    )
                frames[f][k - 1] = token
            elif token != EMPTY:
                raise StructureError(
                    f"real token at forced-EMPTY coordinate (step {t}, codebook {k})",
                    item_offset + t,
                )
    return [tuple(f) for f in frames]


def delay_stack(seq: RearrangedSequence) -> StackedSequence:
    """Apply the delay pattern to every span of Y; markers pass through."""
    segments, relocated = _parse_rearranged(seq.items)
    k_count = seq.num_codebooks
    items: list = []
    table: list[SpanRecord] = []

    def emit(frames: list[FrameTuple], role: str, orig_start: int, mask_index: int = 0):
        start = len(items)
        items.extend(stack_span(frames, k_count))
        table.append(
            SpanRecord(role, orig_start, orig_start + len(frames), start, len(items), mask_index)
        )

    orig_pos = 0
    masked_starts = []
    for i, segment in enumerate(segments):
        emit(segment, "unmasked", orig_pos)
        orig_pos += len(segment)
        if i < len(relocated):
            items.append(mask_marker(i + 1))
            masked_starts.append(orig_pos)
            orig_pos += len(relocated[i])
    items.append(EOU)
    for i, span in enumerate(relocated):
        items.append(mask_marker(i + 1))
        emit(span, "masked", masked_starts[i], mask_index=i + 1)
        items.append(EOS)
    return StackedSequence(items, table, seq.frame_rate, seq.codebook_sizes)


def _parse_stacked(items: list, num_codebooks: int):
    """Parse Z's layout grammar into step runs mirroring Y's span structure."""
    k_count = num_codebooks
    segments: list[tuple[int, list]] = [(0, [])]  # (item offset, steps)
    pos = 0
    n_markers = 0
    while True:
        if pos >= len(items):
            raise StructureError("missing EOU terminator", len(items) - 1 if items else 0)
        item = items[pos]
        if isinstance(item, SpecialToken):
            if item.kind == "eou":
                pos += 1
                break
            if item.kind == "eos":
                raise StructureError("EOS before EOU", pos)
            if item.index != n_markers + 1:
                raise StructureError(
                    f"mask marker {item.index} out of order (expected {n_markers + 1})", pos
                )
            n_markers += 1
            segments.append((pos + 1, []))
        else:
            segments[-1][1].append(item)
        pos += 1

    relocated: list[tuple[int, list]] = []
    for i in range(1, n_markers + 1):
        if pos >= len(items):
            raise StructureError(f"dangling mask marker {i}: relocated span missing", pos - 1)
        marker = items[pos]
        if not (isinstance(marker, SpecialToken) and marker.kind == "mask" and marker.index == i):
            raise StructureError(f"expected relocated marker <M{i}>", pos)
        pos += 1
        run: list = []
        offset = pos
        while True:
            if pos >= len(items):
                raise StructureError(f"relocated span {i} missing EOS", pos - 1)
            item = items[pos]
            if isinstance(item, SpecialToken):
                if item.kind == "eos":
                    pos += 1
                    break
                raise StructureError(f"unexpected {item} inside relocated span {i}", pos)
            run.append(item)
            pos += 1
        relocated.append((offset, run))
    if pos != len(items):
        if isinstance(items[pos], SpecialToken) and items[pos].kind == "eos":
            raise StructureError("unmatched EOS", pos)
        raise StructureError("trailing items after final relocated span", pos)
    return segments, relocated


def unstack(seq: StackedSequence) -> RearrangedSequence:
    """Exact inverse of :func:`delay_stack`; EMPTY fillers are discarded."""
    segments, relocated = _parse_stacked(seq.items, seq.num_codebooks)
    k_count = seq.num_codebooks
    items: list = []
    table: list[SpanRecord] = []
    orig_pos = 0
    masked_lengths = [len(run) - (k_count - 1) for _, run in relocated]

    def emit(offset: int, run: list, role: str, orig_start: int, mask_index: int = 0) -> int:
        frames = unstack_span(run, k_count, item_offset=offset)
        start = len(items)
        items.extend(frames)
        table.append(
            SpanRecord(role, orig_start, orig_start + len(frames), start, len(items), mask_index)
        )
        return len(frames)

    masked_tables = []
    for i, (offset, run) in enumerate(segments):
        orig_pos += emit(offset, run, "unmasked", orig_pos)
        if i < len(relocated):
            items.append(mask_marker(i + 1))
            masked_tables.append((orig_pos, masked_lengths[i]))
            orig_pos += max(masked_lengths[i], 0)
    items.append(EOU)
    for i, (offset, run) in enumerate(relocated):
        items.append(mask_marker(i + 1))
        start, _ = masked_tables[i]
        emit(offset, run, "masked", start, mask_index=i + 1)
        items.append(EOS)
    return RearrangedSequence(items, table, seq.frame_rate, seq.codebook_sizes)


# ---------------------------------------------------------------------------
# Splicing generated spans back into the source matrix
# ---------------------------------------------------------------------------


def splice(matrix: CodecMatrix, spans: list[Span], generated: list[np.ndarray]) -> CodecMatrix:
    """Replace each span's frames with the corresponding generated frames.

    Generated lengths may differ from the original span lengths (an empty
    replacement deletes the span).  Frames outside the spans are copied
    bit-identically.
    """
    validate_spans(spans, matrix.num_frames)
    if len(spans) != len(generated):
        raise InvalidInputError(
            f"{len(spans)} spans but {len(generated)} generated sequences"
        )
    pieces = []
    cursor = 0
    for span, gen in zip(spans, generated):
        pieces.append(matrix.frames[cursor:span.start])
        gen = np.asarray(gen, dtype=np.int64).reshape(-1, matrix.num_codebooks)
        pieces.append(gen)
        cursor = span.end
    pieces.append(matrix.frames[cursor:])
    frames = np.concatenate(pieces, axis=0) if pieces else matrix.frames
    return CodecMatrix(frames, frame_rate=matrix.frame_rate, codebook_sizes=matrix.codebook_sizes)


def format_items(items: list) -> str:
    """Human-readable rendering of a Y or Z item list (debugging aid)."""
    parts = []
    for item in items:
        if isinstance(item, SpecialToken):
            parts.append(str(item))
        else:
            parts.append("(" + ",".join("_" if v == EMPTY else str(v) for v in item) + ")")
    return " ".join(parts)
