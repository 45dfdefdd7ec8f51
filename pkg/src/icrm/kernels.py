"""Backend selection for the hot kernels.

The compiled extension ``icrm._kernels`` is used when importable; setting
``ICRM_PURE_PYTHON=1`` forces the pure-Python twin in ``icrm._pykernels``.
Both export the same functions and status constants.
"""
import os

from . import _pykernels

if os.environ.get("ICRM_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

crc16_ccitt = _impl.crc16_ccitt
encode_deltas = _impl.encode_deltas
decode_deltas = _impl.decode_deltas
sgd_epoch = _impl.sgd_epoch

OK = _pykernels.OK
TRUNCATED = _pykernels.TRUNCATED
OVERLONG = _pykernels.OVERLONG
OUT_OF_RANGE = _pykernels.OUT_OF_RANGE
OUTPUT_SOFTMAX = _pykernels.OUTPUT_SOFTMAX
OUTPUT_SIGMOID = _pykernels.OUTPUT_SIGMOID


def backends():
    """Map of available backend name -> module, for benchmarks and cross-checks."""
    found = {"python": _pykernels}
    try:
        from . import _kernels

        found["compiled"] = _kernels
    except ImportError:
        pass
    return found
