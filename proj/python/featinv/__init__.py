"""Feature-inversion attack toolkit: encoders, noise defense, caption metrics."""

from ._featinv import (
    Encoder,
    FormatError,
    ShapeError,
    ValidationError,
    __version__,
    bleu,
    counter_normal,
    evaluate_captions,
    inject_noise,
    make_toy_corpus,
    metric_tokens,
    rouge_l,
    standard_encoders,
    strip_noise,
)

__all__ = [
    "Encoder",
    "FormatError",
    "ShapeError",
    "ValidationError",
    "__version__",
    "bleu",
    "counter_normal",
    "evaluate_captions",
    "inject_noise",
    "make_toy_corpus",
    "metric_tokens",
    "rouge_l",
    "standard_encoders",
    "strip_noise",
]
