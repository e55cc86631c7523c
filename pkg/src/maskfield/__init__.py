"""maskfield: single-view semantic masks to renderable 3D radiance fields."""

__version__ = "0.1.0"

from .fields import SceneGenerator, StyleCode  # noqa: E402,F401
from .masks import SemanticMask  # noqa: E402,F401
from .rendering import CameraPose, RegionSpec, RenderedImage  # noqa: E402,F401
