"""Training-free, backend-agnostic localized image editing.

Two-stage pipeline: localize what to edit (prompt generation, text-prompted
segmentation, dilation), then modify it (plan generation, seeded
inpainting), with reflective best-of-N self-selection at both stages, plus
a masked-metric evaluation harness and an HTTP session gateway.
"""

from .backends import (
    BackendEndpoint,
    Backends,
    BackendUnavailable,
    BadResponse,
    InpainterBackend,
    MetricBackend,
    ReasonerBackend,
    ScoreContext,
    ScoreStage,
    SegmenterBackend,
    backends_from_endpoints,
)
from .core import (
    BinaryMask,
    Candidate,
    CandidateSet,
    ImageBuf,
    Instruction,
    Prompt,
    PromptKind,
    PromptTemplates,
    decode_image,
    decode_mask,
    encode_image,
    encode_mask,
    full_mask,
    render_mask_overlay,
    select_argmax,
)
from .lcp import LocalizationResult, dilate, run_lcp
from .mcp import ModificationResult, run_mcp
from .metrics import KeepRegion, MetricReport, masked_psnr, masked_ssim
from .pipeline import (
    EditRecord,
    PipelineConfig,
    PipelineMode,
    Session,
    commit_choice,
    edit_once,
    generate_diverse,
    load_session,
    new_session,
    run_session,
    save_session,
)

__version__ = "0.1.0"
