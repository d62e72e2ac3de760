"""Python bindings for the priveri sentinel-verification library."""

import json as _json

from ._core import (
    ArgumentError,
    CapabilityError,
    Cache,
    Error,
    FormatError,
    IntegrityError,
    Model,
    Request,
    analytic_probability,
    assemble_request,
    binomial,
    build_request,
    comm_overhead_bytes,
    fingerprint,
    fingerprint_distance,
    generate_cache,
    init_model,
    load_cache,
    load_model,
    run_request,
    substitute,
    trial_seed,
    verify,
)


def run_attack(**spec):
    """Monte Carlo attack experiment; keyword names follow the CLI flags
    (protocol, strategy, mode, n, k, trials, seed, ...). Returns the report dict."""
    return _json.loads(_core._run_attack_json(**spec))


from . import _core  # noqa: E402

__all__ = [name for name in dir() if not name.startswith("_")]
