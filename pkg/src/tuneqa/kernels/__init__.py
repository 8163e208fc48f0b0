"""Token-sequence kernels with a compiled fast path.

The three kernels (``lcs_length``, ``clipped_ngram_matches``,
``greedy_align``) dominate corpus-scale metric evaluation, so a Cython
extension is built when a compiler is available. The environment variable
``TUNEQA_KERNELS`` picks the backend at import time:

  auto      use the compiled extension if importable, else pure (default)
  compiled  require the extension, fail loudly if missing
  pure      force the Python fallback

Both backends return exact integers and agree on every input.
"""

import os

from ..errors import ConfigError
from . import _pykern

_ENV_VAR = "TUNEQA_KERNELS"
_CHOICES = ("auto", "compiled", "pure")


def _load_backend():
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice not in _CHOICES:
        raise ConfigError(
            f"{_ENV_VAR}={choice!r} not understood; expected one of {_CHOICES}")
    if choice == "pure":
        return _pykern, "pure"
    try:
        from . import _ckern
    except ImportError as exc:
        if choice == "compiled":
            raise ConfigError(
                "compiled kernels requested via TUNEQA_KERNELS=compiled but "
                "the extension is not importable; reinstall with a C compiler "
                f"available ({exc})")
        return _pykern, "pure"
    return _ckern, "compiled"


_impl, BACKEND = _load_backend()

lcs_length = _impl.lcs_length
clipped_ngram_matches = _impl.clipped_ngram_matches
greedy_align = _impl.greedy_align


def get_backends():
    """Map of backend name to module for every backend importable now.

    Always contains "pure"; contains "compiled" when the extension built.
    Used by the benchmark and the backend-agreement tests.
    """
    backends = {"pure": _pykern}
    try:
        from . import _ckern
    except ImportError:
        pass
    else:
        backends["compiled"] = _ckern
    return backends
