"""MCP server entry point."""
import logging

from .config import LOG_LEVEL, configure_logging, mcp

logger = logging.getLogger(__name__)


def main():
    """Start the stdio MCP server with every tool and resource registered."""
    configure_logging(LOG_LEVEL)
    # Import all modules to trigger tool/resource registration
    from . import tools  # noqa: F401
    from . import policies  # noqa: F401

    logger.info("starting MCP server name=%s transport=stdio", mcp.name)
    mcp.run(transport="stdio")


if __name__ == "__main__":
    main()
