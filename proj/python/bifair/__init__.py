"""Python access to the bifair core: pipeline commands plus the small numeric kernels."""

import json as _json

try:
    from . import _bifair as _core
except ImportError:  # in-tree build: the extension sits next to the package
    import _bifair as _core

COMMANDS = ("synth", "prep", "train", "eval", "compare")

BifairError = _core.BifairError
ConfigError = _core.ConfigError

derive_seed = _core.derive_seed
softmax_entropy = _core.softmax_entropy
entropy_coefficients = _core.entropy_coefficients
frank_wolfe = _core.frank_wolfe
topk = _core.topk
recall_at_k = _core.recall_at_k
ndcg_at_k = _core.ndcg_at_k
hr_at_k = _core.hr_at_k
cv = _core.cv
min_bottom = _core.min_bottom
epsilon_if = _core.epsilon_if


def run(command, config, overrides=()):
    """Run a pipeline command; returns the process-style exit status."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    return _core.run_command(command, str(config), [str(o) for o in overrides])


def resolved_config(path, overrides=()):
    return _json.loads(_core.resolved_config(str(path), [str(o) for o in overrides]))


def validate_report(report):
    """Structural problems in a report dict (empty list when valid)."""
    return list(_core.validate_report(_json.dumps(report)))


__all__ = [
    "BifairError",
    "ConfigError",
    "COMMANDS",
    "cv",
    "derive_seed",
    "entropy_coefficients",
    "epsilon_if",
    "frank_wolfe",
    "hr_at_k",
    "min_bottom",
    "ndcg_at_k",
    "recall_at_k",
    "resolved_config",
    "run",
    "softmax_entropy",
    "topk",
    "validate_report",
]
