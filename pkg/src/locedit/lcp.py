"""Localization stage: from (image, instruction) to a selected region mask.

The stage plans (candidate region descriptions from the reasoner), acts
(text-prompted segmentation per description), and optionally reflects
(judge-scored best-of-N over descriptions, then over masks). The winning
raw mask is grown by isotropic disk dilation to absorb segmentation noise
before inpainting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .backends import (
    ReasonerBackend,
    ScoreContext,
    ScoreStage,
    SegmenterBackend,
    backend_name,
)
from .core import BinaryMask, CandidateSet, ImageBuf, Instruction, Prompt

__all__ = ["LocalizationResult", "dilate", "run_lcp"]

DEFAULT_DILATION_RADIUS = 20


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Binary dilation with a Euclidean disk of the given pixel radius.

    Output bit (i,j) is 1 iff some input 1-bit lies within Euclidean
    distance <= radius. Radius 0 is the identity. Computed via an exact
    distance transform on the bounding box of the set pixels, which keeps
    large, mostly-empty masks cheap.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    arr = mask.to_array()
    if radius == 0 or not arr.any():
        return mask
    rows = np.flatnonzero(arr.any(axis=1))
    cols = np.flatnonzero(arr.any(axis=0))
    r0 = max(int(rows[0]) - radius, 0)
    r1 = min(int(rows[-1]) + radius + 1, arr.shape[0])
    c0 = max(int(cols[0]) - radius, 0)
    c1 = min(int(cols[-1]) + radius + 1, arr.shape[1])
    window = arr[r0:r1, c0:c1]
    distance = ndimage.distance_transform_edt(~window)
    out = np.zeros_like(arr)
    out[r0:r1, c0:c1] = distance <= radius
    return BinaryMask(out)


@dataclass(frozen=True)
class LocalizationResult:
    """Everything the localization stage produced for one round."""

    selected_prompt: Prompt
    prompt_candidates: CandidateSet[Prompt]
    mask_candidates: CandidateSet[BinaryMask]
    raw_mask: BinaryMask
    final_mask: BinaryMask
    dilation_radius: int
    empty_mask: bool

    def __post_init__(self) -> None:
        if self.final_mask.popcount < self.raw_mask.popcount:
            raise ValueError("dilation may not shrink the mask")


def run_lcp(
    image: ImageBuf,
    instruction: Instruction,
    reasoner: ReasonerBackend,
    segmenter: SegmenterBackend,
    n_reflect: int = 1,
    dilation_radius: int = DEFAULT_DILATION_RADIUS,
    base_seed: int = 0,
    score_includes_instruction_for_masks: bool = False,
) -> LocalizationResult:
    """Run the localization stage.

    With n_reflect == 1 this is the single-candidate path: one region
    description, one segmentation (variant seed 0), dilation. With
    n_reflect == N > 1, N descriptions are scored and the winner drives N
    segmentations under variant seeds 0..N-1, which are scored in turn;
    dilation applies to the winning raw mask only. An empty selected mask
    is not an error here; it is flagged and left to pipeline policy.
    """
    if n_reflect < 1:
        raise ValueError("n_reflect must be >= 1")
    backend_id = backend_name(reasoner)
    prompts = reasoner.propose_localization(image, instruction, n_reflect, base_seed)
    prompt_set: CandidateSet[Prompt] = CandidateSet.build(
        prompts, [base_seed] * len(prompts), backend_id
    )
    if n_reflect == 1:
        best_prompt = 0
    else:
        prompt_scores = reasoner.score_candidates(
            ScoreStage.LOC_PROMPT,
            ScoreContext(image=image, instruction=instruction.text),
            prompts,
        )
        prompt_set = prompt_set.with_scores(prompt_scores)
        best_prompt = prompt_set.best_index()
    selected_prompt = prompt_set[best_prompt].payload

    seg_backend = backend_name(segmenter)
    masks = [
        segmenter.segment(image, selected_prompt, variant)
        for variant in range(n_reflect)
    ]
    mask_set: CandidateSet[BinaryMask] = CandidateSet.build(
        masks, list(range(n_reflect)), seg_backend
    )
    if n_reflect == 1:
        best_mask = 0
    else:
        mask_scores = reasoner.score_candidates(
            ScoreStage.MASK,
            ScoreContext(
                image=image,
                instruction=instruction.text
                if score_includes_instruction_for_masks
                else None,
                prompt=selected_prompt,
            ),
            masks,
        )
        mask_set = mask_set.with_scores(mask_scores)
        best_mask = mask_set.best_index()
    raw_mask = mask_set[best_mask].payload
    final_mask = dilate(raw_mask, dilation_radius)
    return LocalizationResult(
        selected_prompt=selected_prompt,
        prompt_candidates=prompt_set,
        mask_candidates=mask_set,
        raw_mask=raw_mask,
        final_mask=final_mask,
        dilation_radius=dilation_radius,
        empty_mask=raw_mask.popcount == 0,
    )
