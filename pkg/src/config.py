"""Configuration management for the research-loop engine and MCP server."""
import logging
import os
from dotenv import load_dotenv
from fastmcp import FastMCP

load_dotenv()

# Global MCP instance - accessible everywhere
mcp = FastMCP("research-loop")

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# Remote generator endpoints; the deterministic reference generators are used when unset
DIAGNOSTIC_ENDPOINT = os.getenv("DIAGNOSTIC_ENDPOINT")
SUMMARIZER_ENDPOINT = os.getenv("SUMMARIZER_ENDPOINT")
GENERATOR_API_KEY = os.getenv("GENERATOR_API_KEY")
REMOTE_TIMEOUT = float(os.getenv("REMOTE_TIMEOUT", "30"))

DEFAULT_WORKERS = int(os.getenv("DEFAULT_WORKERS", "1"))
MAX_LINE_BYTES = int(os.getenv("MAX_LINE_BYTES", str(16 * 1024 * 1024)))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Install a single stream handler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())
