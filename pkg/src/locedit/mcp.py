"""Modification stage: from (image, instruction, mask) to the edited image.

Mirrors the localization stage: plan (candidate editing plans from the
reasoner), act (seeded inpainting of the masked region), reflect
(judge-scored best-of-N over plans, then over generated images). Candidate
images vary only by seed; the generator owns its noise schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backends import (
    InpainterBackend,
    ReasonerBackend,
    ScoreContext,
    ScoreStage,
    SegmenterBackend,
    backend_name,
)
from .core import (
    BinaryMask,
    CandidateSet,
    DimMismatch,
    ImageBuf,
    Instruction,
    Prompt,
    ensure_same_dims,
)

__all__ = ["ModificationResult", "relocalize_after_addition", "run_mcp"]


@dataclass(frozen=True)
class ModificationResult:
    """Everything the modification stage produced for one round."""

    selected_plan: Prompt
    plan_candidates: CandidateSet[Prompt]
    image_candidates: CandidateSet[ImageBuf]
    selected_image: ImageBuf
    selected_index: int
    seeds_used: list[int]

    def __post_init__(self) -> None:
        if len(self.image_candidates) != len(self.seeds_used):
            raise ValueError("one seed per image candidate")
        if self.image_candidates[self.selected_index].payload is not self.selected_image:
            raise ValueError("selected_image must be the selected candidate payload")


def run_mcp(
    image: ImageBuf,
    instruction: Instruction,
    mask: BinaryMask,
    reasoner: ReasonerBackend,
    inpainter: InpainterBackend,
    n_reflect: int = 1,
    base_seed: int = 0,
) -> ModificationResult:
    """Run the modification stage.

    With n_reflect == 1: one plan, one inpainting call at base_seed. With
    n_reflect == N > 1: N plans scored against (image, instruction, mask),
    then the winning plan drives N inpainting calls with seeds
    base_seed..base_seed+N-1, scored against (image, instruction). Only the
    selected plan generates images; plans and images are ranked by two
    independent judge calls.
    """
    if n_reflect < 1:
        raise ValueError("n_reflect must be >= 1")
    ensure_same_dims(image, mask)
    backend_id = backend_name(reasoner)
    plans = reasoner.propose_modification(image, instruction, mask, n_reflect, base_seed)
    plan_set: CandidateSet[Prompt] = CandidateSet.build(
        plans, [base_seed] * len(plans), backend_id
    )
    if n_reflect == 1:
        best_plan = 0
    else:
        plan_scores = reasoner.score_candidates(
            ScoreStage.MDF_PROMPT,
            ScoreContext(image=image, instruction=instruction.text, mask=mask),
            plans,
        )
        plan_set = plan_set.with_scores(plan_scores)
        best_plan = plan_set.best_index()
    selected_plan = plan_set[best_plan].payload

    seeds = [base_seed + i for i in range(n_reflect)]
    images = [inpainter.inpaint(image, mask, selected_plan, seed) for seed in seeds]
    image_set: CandidateSet[ImageBuf] = CandidateSet.build(
        images, seeds, backend_name(inpainter)
    )
    if n_reflect == 1:
        best_image = 0
    else:
        image_scores = reasoner.score_candidates(
            ScoreStage.EDITED_IMAGE,
            ScoreContext(image=image, instruction=instruction.text),
            images,
        )
        image_set = image_set.with_scores(image_scores)
        best_image = image_set.best_index()
    return ModificationResult(
        selected_plan=selected_plan,
        plan_candidates=plan_set,
        image_candidates=image_set,
        selected_image=image_set[best_image].payload,
        selected_index=best_image,
        seeds_used=seeds,
    )


def relocalize_after_addition(
    image_before: ImageBuf,
    image_after: ImageBuf,
    instruction: Instruction,
    mask: BinaryMask,
    reasoner: ReasonerBackend,
    segmenter: SegmenterBackend,
    enabled: bool = False,
    n_reflect: int = 1,
    dilation_radius: int = 20,
    base_seed: int = 0,
) -> BinaryMask:
    """Optional post-generation hook for addition-type edits.

    Disabled (the default) it returns the mask unchanged. Enabled, it
    re-runs localization on the edited image so session records can carry a
    mask that tracks the newly added content; the edited image itself is
    never altered.
    """
    if (image_before.width, image_before.height) != (
        image_after.width,
        image_after.height,
    ):
        raise DimMismatch("before/after images differ in size")
    if not enabled:
        return mask
    from .lcp import run_lcp

    result = run_lcp(
        image_after,
        instruction,
        reasoner,
        segmenter,
        n_reflect=n_reflect,
        dilation_radius=dilation_radius,
        base_seed=base_seed,
    )
    return result.final_mask
