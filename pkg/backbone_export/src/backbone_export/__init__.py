"""backbone-export: pretrained no-top trunks -> interchange graphs."""

__version__ = "0.1.0"

from .export import EXPORT_NAMES, RECIPES, export  # noqa: F401
from .torch_export import ExportError  # noqa: F401
from .verify import verify, verify_backbone  # noqa: F401
