"""Numeric profile selection.

Two profiles exist. "verify" computes in float64 and checks every op
output for non-finite values; "fast" computes in float32 and skips the
checks. The initial profile comes from the SMRE_PROFILE environment
variable (default "verify") and can be switched with set_profile().
Metric arithmetic elsewhere in the package is always float64 and does
not consult the profile.
"""

import os

import numpy as np

_PROFILES = {
    "verify": np.float64,
    "fast": np.float32,
}

_active = os.environ.get("SMRE_PROFILE", "verify")
if _active not in _PROFILES:
    raise RuntimeError(
        "SMRE_PROFILE must be one of %s, got %r" % (sorted(_PROFILES), _active)
    )


def set_profile(name):
    global _active
    if name not in _PROFILES:
        raise ValueError("unknown profile %r (choose from %s)" % (name, sorted(_PROFILES)))
    _active = name


def profile_name():
    return _active


def active_dtype():
    return _PROFILES[_active]


def strict_checks():
    """Whether op outputs are checked for NaN/Inf (verify profile only)."""
    return _active == "verify"
