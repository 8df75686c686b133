"""Python access to the captlab library: the capt command line, config
resolution and the synthetic task generators."""

from ._captlab import (
    CaptlabError,
    UsageError,
    decode,
    git_blob_hash,
    resolved_config,
    run,
    synthetic,
)

__all__ = [
    "CaptlabError",
    "UsageError",
    "decode",
    "git_blob_hash",
    "resolved_config",
    "run",
    "synthetic",
]
