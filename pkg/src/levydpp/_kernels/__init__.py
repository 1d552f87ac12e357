"""Hot loops, compiled when available.

``BACKEND`` is ``"cython"`` when the extension imported and ``"python"``
otherwise.  Setting ``LEVYDPP_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _fallback

if os.environ.get("LEVYDPP_PURE_PYTHON", "") not in ("", "0"):
    jump_euler_affine = _fallback.jump_euler_affine
    BACKEND = "python"
else:
    try:
        from ._jump_euler import jump_euler_affine
        BACKEND = "cython"
    except ImportError:
        jump_euler_affine = _fallback.jump_euler_affine
        BACKEND = "python"

python_jump_euler_affine = _fallback.jump_euler_affine
