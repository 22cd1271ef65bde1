# Copyright (C) 2026 The roundattn Authors
# SPDX-License-Identifier: Apache-2.0
"""Round-granularity KV cache selection and offload simulator."""

import json as _json

from ._core import (
    Error,
    InputError,
    footprint_report,
    kl_divergence,
    memory_ratio,
    normalize,
    reference_rows,
    run_command,
    save_percent,
    select,
)


def report(*args):
    """Runs a subcommand and returns its parsed JSON report; raises on a non-zero exit."""
    code, out, err = run_command([str(a) for a in args])
    if code != 0:
        raise RuntimeError(f"roundattn exited with {code}: {err.strip()}")
    return _json.loads(out)


__all__ = [
    "Error",
    "InputError",
    "footprint_report",
    "kl_divergence",
    "memory_ratio",
    "normalize",
    "reference_rows",
    "report",
    "run_command",
    "save_percent",
    "select",
]
