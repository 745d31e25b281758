"""Hot kernels with a compiled core and a pure-Python fallback.

The compiled extension is preferred when present; set ``RIGIDSEG_PURE=1``
to force the fallback. Both expose the same two functions:

* ``mincut``        exact s-t minimum cut (Dinic) for binary label moves
* ``match_patches`` SSD block matching for the feature tracker
"""

import os

from . import pure

if os.environ.get("RIGIDSEG_PURE"):
    _impl = pure
    HAVE_COMPILED = False
else:
    try:
        from . import _core as _impl

        HAVE_COMPILED = True
    except ImportError:
        _impl = pure
        HAVE_COMPILED = False

mincut = _impl.mincut
match_patches = _impl.match_patches


def implementations():
    """(name, module) pairs of every available implementation."""
    impls = [("pure", pure)]
    try:
        from . import _core

        impls.append(("compiled", _core))
    except ImportError:
        pass
    return impls
