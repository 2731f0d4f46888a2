from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from locedit.core import (
    BinaryMask,
    CandidateSet,
    EmptyCandidates,
    ImageBuf,
    Instruction,
    MalformedPng,
    NonFiniteScore,
    Prompt,
    PromptKind,
    PromptTemplates,
    UnsupportedDepth,
    ZeroDimension,
    decode_image,
    decode_mask,
    encode_image,
    encode_mask,
    full_mask,
    render_mask_overlay,
    select_argmax,
)

from conftest import random_image, random_mask


def pillow_png(array: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array, mode).save(buf, format="PNG")
    return buf.getvalue()


class TestDecodeImage:
    def test_all_white_2x2(self):
        png = pillow_png(np.full((2, 2, 3), 255, np.uint8), "RGB")
        img = decode_image(png)
        assert (img.width, img.height) == (2, 2)
        assert img.pixels == b"\xff" * 12

    def test_rgba_alpha_dropped(self):
        arr = np.zeros((3, 4, 4), np.uint8)
        arr[..., 0] = 200
        arr[..., 3] = 7
        img = decode_image(pillow_png(arr, "RGBA"))
        assert (img.width, img.height) == (4, 3)
        assert img.to_array()[0, 0].tolist() == [200, 0, 0]

    def test_grayscale_replicated(self):
        img = decode_image(pillow_png(np.full((2, 2), 9, np.uint8), "L"))
        assert img.to_array()[0, 0].tolist() == [9, 9, 9]

    def test_malformed_bytes(self):
        with pytest.raises(MalformedPng):
            decode_image(b"not a png at all")
        with pytest.raises(MalformedPng):
            decode_image(b"")

    def test_truncated_png(self):
        png = pillow_png(np.zeros((8, 8, 3), np.uint8), "RGB")
        with pytest.raises(MalformedPng):
            decode_image(png[:40])

    def test_non_png_image_rejected(self):
        buf = io.BytesIO()
        Image.fromarray(np.zeros((4, 4, 3), np.uint8), "RGB").save(buf, format="JPEG")
        with pytest.raises(MalformedPng):
            decode_image(buf.getvalue())

    def test_16_bit_rejected(self):
        buf = io.BytesIO()
        Image.fromarray(np.zeros((4, 4), np.uint16)).save(buf, format="PNG")
        with pytest.raises(UnsupportedDepth):
            decode_image(buf.getvalue())

    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_law(self, width, height, seed):
        rng = np.random.default_rng(seed)
        img = random_image(rng, width, height)
        again = decode_image(encode_image(img))
        assert again == img
        assert (again.width, again.height) == (img.width, img.height)

    def test_reencode_of_foreign_png_is_stable(self, rng):
        # encode(decode(b)) re-decodes to identical pixels for any valid b
        arr = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        foreign = pillow_png(arr, "RGB")
        once = decode_image(foreign)
        twice = decode_image(encode_image(once))
        assert once == twice


class TestDecodeMask:
    def test_all_black_and_all_white(self):
        zeros = decode_mask(pillow_png(np.zeros((4, 4), np.uint8), "L"))
        assert zeros.popcount == 0
        ones = decode_mask(pillow_png(np.full((4, 4), 255, np.uint8), "L"))
        assert ones.popcount == 16

    def test_checkerboard_matches_thresholding_oracle(self):
        for w, h in [(4, 4), (5, 3), (7, 7)]:
            board = ((np.indices((h, w)).sum(axis=0) + 1) % 2 * 255).astype(np.uint8)
            mask = decode_mask(pillow_png(board, "L"))
            # brute-force per-pixel thresholding oracle
            oracle = [
                [board[i, j] >= 128 for j in range(w)] for i in range(h)
            ]
            assert mask.to_array().tolist() == oracle
            assert mask.popcount == math.ceil(w * h / 2)

    def test_threshold_boundary(self):
        values = np.array([[127, 128], [0, 255]], np.uint8)
        mask = decode_mask(pillow_png(values, "L"), threshold=128)
        assert mask.to_array().tolist() == [[False, True], [False, True]]

    def test_rgb_mask_uses_luma(self):
        arr = np.zeros((1, 2, 3), np.uint8)
        arr[0, 1] = (255, 255, 255)
        mask = decode_mask(pillow_png(arr, "RGB"))
        assert mask.to_array().tolist() == [[False, True]]

    def test_mask_roundtrip(self, rng):
        mask = random_mask(rng, 13, 9)
        assert decode_mask(encode_mask(mask)) == mask

    def test_malformed(self):
        with pytest.raises(MalformedPng):
            decode_mask(b"\x89PNG garbage")


class TestSelectArgmax:
    def test_first_max_tie_break(self):
        assert select_argmax([3, 5, 5, 2]) == 1

    def test_singleton(self):
        assert select_argmax([7]) == 0

    def test_empty(self):
        with pytest.raises(EmptyCandidates):
            select_argmax([])

    def test_non_finite(self):
        with pytest.raises(NonFiniteScore):
            select_argmax([1.0, float("nan")])
        with pytest.raises(NonFiniteScore):
            select_argmax([float("inf")])

    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=30))
    @settings(max_examples=200, deadline=None)
    def test_matches_linear_scan_oracle(self, scores):
        best, best_score = 0, scores[0]
        for i, s in enumerate(scores):
            if s > best_score:
                best, best_score = i, s
        assert select_argmax([float(s) for s in scores]) == best


class TestFullMask:
    def test_popcount(self):
        assert full_mask(3, 2).popcount == 6

    def test_no_zero_bit(self):
        assert full_mask(5, 4).to_array().all()

    def test_zero_dims(self):
        with pytest.raises(ZeroDimension):
            full_mask(0, 3)
        with pytest.raises(ZeroDimension):
            full_mask(3, 0)


class TestDomainTypes:
    def test_imagebuf_length_invariant(self):
        with pytest.raises(ValueError):
            ImageBuf.from_pixels(2, 2, b"\x00" * 11)

    def test_imagebuf_immutable(self, rng):
        img = random_image(rng, 4, 4)
        with pytest.raises(ValueError):
            img.to_array()[0, 0, 0] = 1

    def test_instruction_requires_text(self):
        with pytest.raises(ValueError):
            Instruction("   ")
        assert Instruction("go").text == "go"

    def test_prompt_kinds(self):
        with pytest.raises(ValueError):
            Prompt(PromptKind.LOCALIZATION, "")
        p = Prompt(PromptKind.MODIFICATION, "paint it red")
        assert p.kind is PromptKind.MODIFICATION

    def test_candidate_set_contiguous_indices(self):
        prompts = [Prompt(PromptKind.LOCALIZATION, f"p{i}") for i in range(3)]
        cs = CandidateSet.build(prompts, [0, 0, 0], "test")
        assert [c.index for c in cs] == [0, 1, 2]
        scored = cs.with_scores([1.0, 9.0, 4.0])
        assert scored.best_index() == 1
        assert cs.scores == [None, None, None]

    def test_candidate_set_rejects_nan_scores(self):
        prompts = [Prompt(PromptKind.LOCALIZATION, "p")]
        cs = CandidateSet.build(prompts, [0], "test")
        with pytest.raises(NonFiniteScore):
            cs.with_scores([float("nan")])

    def test_candidate_set_score_count(self):
        prompts = [Prompt(PromptKind.LOCALIZATION, "p")]
        cs = CandidateSet.build(prompts, [0], "test")
        with pytest.raises(ValueError):
            cs.with_scores([1.0, 2.0])

    def test_templates_default_nonempty(self):
        t = PromptTemplates()
        assert t.localization and t.modification and t.reflection
        with pytest.raises(ValueError):
            PromptTemplates(localization=" ")

    def test_mask_image_dim_agreement(self, rng):
        img = random_image(rng, 5, 5)
        mask = random_mask(rng, 4, 5)
        from locedit.core import DimMismatch, ensure_same_dims

        with pytest.raises(DimMismatch):
            ensure_same_dims(img, mask)


class TestOverlay:
    def test_overlay_only_touches_masked_pixels(self, rng):
        img = random_image(rng, 8, 6)
        arr = np.zeros((6, 8), bool)
        arr[2:4, 3:5] = True
        overlay = render_mask_overlay(img, BinaryMask(arr))
        a, b = img.to_array(), overlay.to_array()
        assert (a[~arr] == b[~arr]).all()
        assert (b[arr, 0] == (a[arr, 0].astype(int) + 255) // 2).all()
        assert (b[arr, 1] == a[arr, 1] // 2).all()

    def test_empty_mask_overlay_is_identity(self, rng):
        img = random_image(rng, 8, 6)
        empty = BinaryMask(np.zeros((6, 8), bool))
        assert render_mask_overlay(img, empty) == img

    def test_overlay_dim_mismatch(self, rng):
        from locedit.core import DimMismatch

        with pytest.raises(DimMismatch):
            render_mask_overlay(random_image(rng, 4, 4), full_mask(5, 4))
