"""Walk through the two token rearrangement steps and their inverses.

A codec utterance is a T x K matrix of discrete token ids.  To let a
left-to-right model infill a masked region conditioned on BOTH sides,
masked spans are relocated to the tail of the sequence (causal masking);
to emit all K codebooks in one step while keeping codebook k after
codebook k-1 of the same frame, each span is then delay-stacked.
"""

import numpy as np

from codec_infill import (
    CodecMatrix,
    MaskSamplingConfig,
    Span,
    causal_mask,
    delay_stack,
    sample_mask_spans,
    uncausal_mask,
    unstack,
)
from codec_infill.rearrange import format_items, truncated_poisson_pmf

# --- a 6-frame, 4-codebook utterance with recognizable values -------------
frames = np.array([[10 * i + c for c in range(4)] for i in range(1, 7)])
x = CodecMatrix(frames, codebook_sizes=(2048,) * 4)
print("X (rows are frames X1..X6):")
print(x.frames)

# --- step 1: relocate the masked span X2..X4 to the tail ------------------
y = causal_mask(x, [Span(1, 4)])
print("\nY = causal_mask(X, [X2..X4]):")
print(" ", format_items(y.items))
print("  unmasked context first, EOU, then <M1> introducing the relocated")
print("  span, closed by EOS")

# --- step 2: delay-stack every span ----------------------------------------
z = delay_stack(y)
print("\nZ = delay_stack(Y)  ('_' marks the EMPTY filler):")
print(" ", format_items(z.items))
print("  codebook k is shifted k-1 steps, so a span of L frames becomes")
print("  L + K - 1 steps and each step carries one token per codebook")

# --- both steps invert exactly ---------------------------------------------
back_x, back_spans = uncausal_mask(y)
assert back_x == x and back_spans == [Span(1, 4)]
assert unstack(z) == y
print("\nround trips: uncausal_mask(causal_mask(X)) == X  and")
print("             unstack(delay_stack(Y)) == Y  (exact)")

# --- the training-time span sampler ----------------------------------------
cfg = MaskSamplingConfig()  # Poisson(1) count truncated to [1, 3]
rng = np.random.default_rng(0)
counts = np.zeros(4)
for _ in range(20000):
    counts[len(sample_mask_spans(500, cfg, rng))] += 1
print("\nspan-count frequencies over 20k draws:", np.round(counts[1:] / 20000, 3))
print("analytic truncated-Poisson pmf:        ", np.round(truncated_poisson_pmf(1.0, 1, 3), 3))
