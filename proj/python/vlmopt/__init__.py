"""Black-box prompt search for vision-language models."""

from ._core import (
    ConversationMode,
    FatalBackendError,
    FeedbackMode,
    InvalidArgument,
    RunConfig,
    Template,
    VlmoptError,
    ape_prompt,
    build_pool,
    count_words,
    estimate_cost,
    feedback_prompt,
    format_dollars,
    generation_wrapper,
    inversion_critic_prompt,
    parse_critic_reply,
    parse_reply,
    quiet,
    run_mock,
    t2i_critic_prompt,
    t2i_mock,
)

__all__ = [
    "ConversationMode",
    "FatalBackendError",
    "FeedbackMode",
    "InvalidArgument",
    "RunConfig",
    "Template",
    "VlmoptError",
    "ape_prompt",
    "build_pool",
    "count_words",
    "estimate_cost",
    "feedback_prompt",
    "format_dollars",
    "generation_wrapper",
    "inversion_critic_prompt",
    "parse_critic_reply",
    "parse_reply",
    "quiet",
    "run_mock",
    "t2i_critic_prompt",
    "t2i_mock",
]
