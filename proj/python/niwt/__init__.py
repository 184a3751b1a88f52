"""Python bindings for the niwt C++ core."""

from ._niwt import *  # noqa: F401,F403
from ._niwt import NiwtError, RunConfig, Network, __version__  # noqa: F401
