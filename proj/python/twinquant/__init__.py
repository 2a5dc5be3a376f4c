"""Python surface for the quantization kernels.

The compiled module lives inside the package when installed as a wheel and on
PYTHONPATH when running against a plain CMake build tree; support both.
"""

try:
    from ._twinquant import *  # noqa: F401,F403
    from ._twinquant import __version__  # noqa: F401
except ImportError:  # build-tree layout
    from _twinquant import *  # noqa: F401,F403
    from _twinquant import __version__  # noqa: F401
