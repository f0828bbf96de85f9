from .kernels import BACKEND
from .toycodec import *  # noqa: F401,F403
from .toycodec import __all__ as _codec_all

__all__ = ["BACKEND", *_codec_all]
