from __future__ import annotations

import numpy as np
import pytest

from locedit.backends import ScoreStage
from locedit.core import BinaryMask, ImageBuf
from locedit.mocks import Directive, MockScenario


def random_image(rng: np.random.Generator, width: int, height: int) -> ImageBuf:
    return ImageBuf(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def random_mask(
    rng: np.random.Generator, width: int, height: int, density: float = 0.5
) -> BinaryMask:
    return BinaryMask(rng.random((height, width)) < density)


def scripted_scenario(
    instruction: str = "remove the red car",
    n: int = 3,
    prompt_scores: dict[int, float] | None = None,
    mask_scores: dict[int, float] | None = None,
    plan_scores: dict[int, float] | None = None,
    image_scores: dict[int, float] | None = None,
    rects: list[tuple[int, int, int, int]] | None = None,
    judge: tuple[bool, str] | None = (True, "looks right"),
) -> MockScenario:
    """One-instruction scenario with n candidates at every stage.

    rects[v] is the rectangle the segmenter returns for variant seed v (any
    localization prompt); defaults to nested rectangles so variants differ.
    """
    scenario = MockScenario()
    loc_texts = [f"region candidate {i}" for i in range(n)]
    scenario.loc_prompts[instruction] = loc_texts
    scenario.mdf_prompts[instruction] = [f"edit plan {i}" for i in range(n)]
    scenario.scores = {
        ScoreStage.LOC_PROMPT: dict(prompt_scores or {}),
        ScoreStage.MASK: dict(mask_scores or {}),
        ScoreStage.MDF_PROMPT: dict(plan_scores or {}),
        ScoreStage.EDITED_IMAGE: dict(image_scores or {}),
    }
    if rects is None:
        rects = [(2 + v, 2 + v, 6, 6) for v in range(n)]
    for text in loc_texts + [instruction]:
        for v, rect in enumerate(rects):
            scenario.directives[(text, v)] = Directive.rect(*rect)
    if judge is not None:
        scenario.judge[instruction] = judge
    return scenario


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
