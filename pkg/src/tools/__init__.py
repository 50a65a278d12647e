"""Auto-import all tool modules to register them."""
# Import all tool modules - they will auto-register with the global mcp instance
from . import experiments  # noqa: F401
from . import statistics  # noqa: F401
from . import traces  # noqa: F401
