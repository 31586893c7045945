from ._dfps import *  # noqa: F401,F403
from ._dfps import __version__  # noqa: F401
